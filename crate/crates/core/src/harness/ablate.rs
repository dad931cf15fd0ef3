//! Module-ablation grids over a shared base configuration.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::data::Corpus;
use super::metrics::{write_records, MetricsRow, MetricsSink};
use super::train::{evaluate, TrainConfig, Trainer};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::ldrscm::{alpha_grad_report, ResidualStrategy};
use crate::model::{LanguageModel, ModelConfig};
use crate::mtpim::required_len;
use crate::nn::{Activation, TokenIds};
use crate::scalar::Scalar;

/// Values per axis; an axis left at its base value has a single entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub residual: Vec<ResidualStrategy>,
    pub activation: Vec<Activation>,
    pub mtpim: Vec<bool>,
    pub conv: Vec<bool>,
}

pub const AXES: [&str; 4] = ["residual", "activation", "mtpim", "conv"];

impl AblationGrid {
    /// The single cell matching `base`.
    pub fn base(base: &ModelConfig) -> Self {
        AblationGrid {
            residual: vec![base.residual],
            activation: vec![base.activation],
            mtpim: vec![base.n_depths > 0],
            conv: vec![!base.kernels.is_empty()],
        }
    }

    /// Comma-separated axis names (`residual,activation,mtpim,conv` or
    /// `full`); each named axis takes every value.
    pub fn parse(spec: &str, base: &ModelConfig) -> Result<Self> {
        let mut g = AblationGrid::base(base);
        for axis in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match axis {
                "residual" => g.residual = ResidualStrategy::ALL.to_vec(),
                "activation" => g.activation = vec![Activation::Swish, Activation::ESwish],
                "mtpim" => g.mtpim = vec![true, false],
                "conv" => g.conv = vec![true, false],
                "full" => {
                    g = AblationGrid::parse("residual,activation,mtpim", base)?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation axis `{other}`; valid axes: {}, full",
                        AXES.join(", ")
                    )))
                }
            }
        }
        Ok(g)
    }

    pub fn cells(&self, base: &ModelConfig) -> Vec<Cell> {
        let mut out = Vec::new();
        for &residual in &self.residual {
            for &activation in &self.activation {
                for &mtpim in &self.mtpim {
                    for &conv in &self.conv {
                        out.push(Cell::new(base, residual, activation, mtpim, conv));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub residual: ResidualStrategy,
    pub activation: Activation,
    pub mtpim: bool,
    pub conv: bool,
    pub model: ModelConfig,
}

/// Depth count restored when a grid turns prediction heads on for a base without any.
const DEFAULT_DEPTHS: usize = 2;
/// Kernels restored when a grid turns convolutions on for a base without any.
const DEFAULT_KERNELS: [usize; 2] = [3, 15];

impl Cell {
    fn new(
        base: &ModelConfig,
        residual: ResidualStrategy,
        activation: Activation,
        mtpim: bool,
        conv: bool,
    ) -> Self {
        let mut model = ModelConfig {
            residual,
            activation,
            ..base.clone()
        };
        if !mtpim {
            model.n_depths = 0;
            model.gammas = None;
        } else if model.n_depths == 0 {
            model.n_depths = DEFAULT_DEPTHS;
        }
        if !conv {
            model.kernels.clear();
        } else if model.kernels.is_empty() {
            model.kernels = DEFAULT_KERNELS.to_vec();
        }
        let flag = |on: bool| if on { "on" } else { "off" };
        let name = format!(
            "{}-{}-mtpim_{}-conv_{}",
            residual.name(),
            activation.name(),
            flag(mtpim),
            flag(conv)
        );
        Cell {
            name,
            residual,
            activation,
            mtpim,
            conv,
            model,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub ldrscm: bool,
    pub eswish: bool,
    pub mtpim: bool,
    pub conv: bool,
    pub step0_loss: f64,
    pub final_train_loss: f64,
    pub heldout_loss_main: f64,
    pub heldout_bpb: f64,
    pub params: usize,
}

pub struct AblationReport {
    pub cells: Vec<CellSummary>,
    pub metrics: Vec<Vec<MetricsRow>>,
}

/// Trains every cell with the same data seed and train config. With an
/// output directory, writes `<cell>.jsonl` per cell, CSV mirrors,
/// per-cell skip-weight gradient tables under `alpha/`, and
/// `summary.csv` / `summary.md`.
pub fn ablate<T: Scalar>(
    base: &ModelConfig,
    train: &TrainConfig,
    grid: &AblationGrid,
    corpus: &Corpus,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let mut report = AblationReport {
        cells: Vec::new(),
        metrics: Vec::new(),
    };
    for cell in grid.cells(base) {
        let model = LanguageModel::<T>::new(cell.model.clone())?;
        let params = model.store.num_scalars();
        let mut sink = match out {
            Some(dir) => MetricsSink::to_files(dir, &cell.name, cell.model.n_depths)?,
            None => MetricsSink::memory(),
        };
        let mut trainer = Trainer::new(model, train.clone())?;
        trainer.run(corpus, &mut sink, None)?;
        if cell.activation == Activation::Swish {
            for id in trainer.model.activation_params() {
                if trainer
                    .model
                    .store
                    .value(id)
                    .data()
                    .iter()
                    .any(|&b| b != T::one())
                {
                    return Err(Error::contract(format!(
                        "{}: swish cell moved {}",
                        cell.name,
                        trainer.model.store.get(id).name
                    )));
                }
            }
        }
        if let (Some(dir), true) = (out, cell.residual == ResidualStrategy::LearnableDense) {
            let rows = alpha_rows(&trainer.model, corpus, train.seq_len)?;
            write_records(
                &dir.join("alpha").join(format!("{}.jsonl", cell.name)),
                &rows,
            )?;
        }
        let rows = sink.into_rows();
        let step0 = rows
            .iter()
            .find(|r| r.split == "train")
            .map_or(f64::NAN, |r| r.loss_total);
        let last_train = rows
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map_or(f64::NAN, |r| r.loss_total);
        let held = if corpus.heldout.is_empty() {
            None
        } else {
            Some(evaluate(
                &trainer.model,
                &corpus.heldout,
                train.seq_len,
                train.eval_rows,
                train.shards,
            )?)
        };
        report.cells.push(CellSummary {
            cell: cell.name.clone(),
            ldrscm: cell.residual == ResidualStrategy::LearnableDense,
            eswish: cell.activation == Activation::ESwish,
            mtpim: cell.mtpim,
            conv: cell.conv,
            step0_loss: step0,
            final_train_loss: last_train,
            heldout_loss_main: held.as_ref().map_or(f64::NAN, |h| h.loss_main),
            heldout_bpb: held.as_ref().map_or(f64::NAN, |h| h.bits_per_byte),
            params,
        });
        report.metrics.push(rows);
    }
    if let Some(dir) = out {
        let mut csv = csv::Writer::from_path(dir.join("summary.csv"))?;
        for c in &report.cells {
            csv.serialize(c)?;
        }
        csv.flush()?;
        fs::write(dir.join("summary.md"), summary_table(&report.cells))?;
    }
    Ok(report)
}

/// Skip-logit gradients on a few held-out rows, checked in double precision.
fn alpha_rows<T: Scalar>(
    model: &LanguageModel<T>,
    corpus: &Corpus,
    seq_len: usize,
) -> Result<Vec<crate::ldrscm::AlphaGradRow>> {
    let mut m64 = model.cast::<f64>()?;
    let source = if corpus.heldout.is_empty() {
        &corpus.train
    } else {
        &corpus.heldout
    };
    let row_len = required_len(seq_len, m64.config.n_depths);
    let rows: Vec<Vec<usize>> = super::data::eval_rows(source, seq_len, row_len, 2);
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let tokens = TokenIds::from_rows(&rows)?;
    let stack = m64.stack.clone();
    let probe = m64.clone();
    alpha_grad_report(&mut m64.store, &stack, 1e-6, |g: &Graph<f64>, st| {
        let sc = crate::nn::Scope::new(g, st);
        Ok(probe.loss(sc, &tokens, seq_len)?.total)
    })
}

/// Markdown table with one check-mark column per module.
pub fn summary_table(cells: &[CellSummary]) -> String {
    let mark = |b: bool| if b { "✓" } else { "×" };
    let mut s = String::from(
        "| cell | LDRSCM | eSwish | MTPIM | conv | step-0 loss | final train loss | held-out loss | held-out bpb |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for c in cells {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            c.cell,
            mark(c.ldrscm),
            mark(c.eswish),
            mark(c.mtpim),
            mark(c.conv),
            c.step0_loss,
            c.final_train_loss,
            c.heldout_loss_main,
            c.heldout_bpb
        ));
    }
    s
}
