//! SNR sweeps and ablation runs over trained pipelines, with tabular output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::channel_codec::{
    self, Ablation, FrozenSource, ImageOutcome, Pipeline, Stage2Config,
};
use crate::data::{DatasetHandle, ImageSet};
use crate::error::{Error, Result};
use crate::interface::InterfaceSpec;
use crate::metrics;

/// Tolerance when matching a requested CBR against a model's CBR.
const CBR_MATCH: f64 = 1e-9;

/// A trained pipeline together with the grid coordinates it serves.
pub struct TrainedModel<'a> {
    pub channel: ChannelKind,
    pub cbr: f64,
    pub pipeline: Pipeline<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub channels: Vec<ChannelKind>,
    pub cbrs: Vec<f64>,
    pub snrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub channel: ChannelKind,
    pub cbr: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl SweepCell {
    /// Channel-draw seed. Independent of SNR and CBR so that the points of
    /// one row see the same underlying noise and fading draws.
    pub fn stream_seed(&self) -> u64 {
        let tag = match self.channel {
            ChannelKind::Awgn => 0xA5A5_0000,
            ChannelKind::Rayleigh => 0x5A5A_0000,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ber: f64,
    pub samples: usize,
    pub records: Vec<ImageOutcome>,
}

impl CellResult {
    fn from_records(cell: SweepCell, records: Vec<ImageOutcome>) -> Self {
        let psnr: Vec<f64> = records.iter().map(|r| r.psnr).collect();
        let ber: Vec<f64> = records.iter().map(|r| r.ber).collect();
        Self {
            cell,
            mean_psnr: metrics::mean(&psnr),
            std_psnr: metrics::std_dev(&psnr),
            mean_ber: metrics::mean(&ber),
            samples: records.len(),
            records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn cell(&self, channel: ChannelKind, cbr: f64, snr_db: f64, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.cell.channel == channel
                && (c.cell.cbr - cbr).abs() < CBR_MATCH
                && c.cell.snr_db == snr_db
                && c.cell.seed == seed
        })
    }

    /// Mean PSNR over seeds for one `(channel, cbr, snr)` point.
    pub fn mean_over_seeds(&self, channel: ChannelKind, cbr: f64, snr_db: f64) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| {
                c.cell.channel == channel && (c.cell.cbr - cbr).abs() < CBR_MATCH && c.cell.snr_db == snr_db
            })
            .map(|c| c.mean_psnr)
            .collect();
        metrics::mean(&v)
    }

    /// Whether every aggregate equals a recomputation from its records.
    pub fn aggregates_consistent(&self) -> bool {
        self.cells
            .iter()
            .all(|c| CellResult::from_records(c.cell, c.records.clone()) == *c)
    }

    /// One row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "channel", "cbr", "snr_db", "seed", "mean_psnr_db", "std_psnr_db", "mean_ber", "samples",
        ])
        .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.cell.channel.to_string(),
                format!("{:.6}", c.cell.cbr),
                format!("{}", c.cell.snr_db),
                c.cell.seed.to_string(),
                format!("{:.6}", c.mean_psnr),
                format!("{:.6}", c.std_psnr),
                format!("{:.8}", c.mean_ber),
                c.samples.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// One row per evaluated image.
    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["channel", "cbr", "snr_db", "seed", "image", "psnr_db", "ber"])
            .map_err(csv_err)?;
        for c in &self.cells {
            for (i, r) in c.records.iter().enumerate() {
                w.write_record([
                    c.cell.channel.to_string(),
                    format!("{:.6}", c.cell.cbr),
                    format!("{}", c.cell.snr_db),
                    c.cell.seed.to_string(),
                    i.to_string(),
                    format!("{:.6}", r.psnr),
                    format!("{:.8}", r.ber),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Evaluates every grid cell over the whole test split. Cells run in
/// parallel; results come back in grid order.
pub fn run_sweep(models: &[TrainedModel<'_>], grid: &SweepGrid, test: &ImageSet) -> Result<SweepResult> {
    let find = |channel: ChannelKind, cbr: f64| {
        models
            .iter()
            .find(|m| m.channel == channel && (m.cbr - cbr).abs() < CBR_MATCH)
    };
    let mut missing = Vec::new();
    for &channel in &grid.channels {
        for &cbr in &grid.cbrs {
            if find(channel, cbr).is_none() {
                missing.push(format!("{channel} @ cbr {cbr}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    if test.is_empty() {
        return Err(Error::Validation("empty test split".into()));
    }
    let mut cells = Vec::new();
    for &channel in &grid.channels {
        for &cbr in &grid.cbrs {
            for &snr_db in &grid.snrs {
                for &seed in &grid.seeds {
                    cells.push(SweepCell {
                        channel,
                        cbr,
                        snr_db,
                        seed,
                    });
                }
            }
        }
    }
    let cells = cells
        .par_iter()
        .map(|cell| {
            let model = find(cell.channel, cell.cbr).expect("checked above");
            let records = model
                .pipeline
                .evaluate(test, cell.channel, cell.snr_db, cell.stream_seed(), 256)?;
            Ok(CellResult::from_records(*cell, records))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Ablation,
    pub seed: u64,
    pub snr_db: f64,
    pub psnr: f64,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub stage1_fingerprint: String,
    pub channel: ChannelKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_psnr(&self, arm: Ablation, snr_db: f64) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm && r.snr_db == snr_db)
            .map(|r| r.psnr)
            .collect();
        metrics::mean(&v)
    }

    pub fn arms(&self) -> Vec<Ablation> {
        let mut arms: Vec<Ablation> = self.rows.iter().map(|r| r.arm).collect();
        arms.sort();
        arms.dedup();
        arms
    }

    pub fn snrs(&self) -> Vec<f64> {
        let mut snrs: Vec<f64> = self.rows.iter().map(|r| r.snr_db).collect();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup();
        snrs
    }

    /// Per-arm PSNR-vs-SNR table, averaged over seeds.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "snr_db", "mean_psnr_db", "seeds", "trainable_params"])
            .map_err(csv_err)?;
        for arm in self.arms() {
            let params = self
                .rows
                .iter()
                .find(|r| r.arm == arm)
                .map(|r| r.trainable_params)
                .unwrap_or(0);
            for snr in self.snrs() {
                let seeds = self.rows.iter().filter(|r| r.arm == arm && r.snr_db == snr).count();
                w.write_record([
                    arm.to_string(),
                    format!("{snr}"),
                    format!("{:.6}", self.mean_psnr(arm, snr)),
                    seeds.to_string(),
                    params.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

/// Trains and evaluates each ablation arm against the same frozen source
/// and interface, with identical seeds and data order per seed.
pub fn run_ablation(
    dataset: &DatasetHandle,
    source: &FrozenSource,
    spec: &InterfaceSpec,
    base: &Stage2Config,
    arms: &[Ablation],
    seeds: &[u64],
    snrs: &[f64],
) -> Result<AblationTable> {
    let jobs: Vec<(Ablation, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let mut config = base.clone();
            config.codec.ablation = arm;
            config.seed = seed;
            let outcome = channel_codec::train_stage2(dataset, source, spec, &config)?;
            let pipeline = Pipeline {
                source: source.codec(),
                channel: &outcome.codec,
                spec,
            };
            let params = outcome.store.num_params();
            snrs.iter()
                .map(|&snr_db| {
                    let cell = SweepCell {
                        channel: base.channel,
                        cbr: 0.0,
                        snr_db,
                        seed,
                    };
                    let psnr = pipeline.mean_psnr(dataset.test(), base.channel, snr_db, cell.stream_seed())?;
                    Ok(AblationRow {
                        arm,
                        seed,
                        snr_db,
                        psnr,
                        trainable_params: params,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        stage1_fingerprint: spec.training_fingerprint().to_string(),
        channel: base.channel,
        rows: per_job.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_codec::{ChannelCodec, ChannelCodecConfig};
    use crate::data::make_synthetic;
    use crate::image::ImageShape;
    use crate::nn::ParamStore;
    use crate::source::{Backbone, SourceCodec, SourceCodecConfig};

    struct Fixture {
        source: SourceCodec,
        channel: ChannelCodec,
        spec: InterfaceSpec,
        data: DatasetHandle,
    }

    fn fixture() -> Fixture {
        let shape = ImageShape::new(8, 8, 3);
        let mut s = ParamStore::new(0);
        let source = SourceCodec::new(
            &mut s,
            &SourceCodecConfig {
                shape,
                bit_count: 24,
                backbone: Backbone::Mlp { hidden: vec![16] },
            },
        )
        .unwrap();
        let mut c = ParamStore::new(1);
        let channel = ChannelCodec::new(
            &mut c,
            &ChannelCodecConfig {
                bit_count: 24,
                symbol_count: 12,
                tokens: 6,
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                se_reduction: 2,
                cond_hidden: 4,
                ablation: Ablation::Full,
            },
        )
        .unwrap();
        Fixture {
            source,
            channel,
            spec: InterfaceSpec::new(vec![0.2; 24], "t").unwrap(),
            data: make_synthetic(32, shape, 4).unwrap(),
        }
    }

    #[test]
    fn one_cell_and_determinism() {
        let f = fixture();
        let models = [TrainedModel {
            channel: ChannelKind::Awgn,
            cbr: 0.0625,
            pipeline: Pipeline {
                source: &f.source,
                channel: &f.channel,
                spec: &f.spec,
            },
        }];
        let grid = SweepGrid {
            channels: vec![ChannelKind::Awgn],
            cbrs: vec![0.0625],
            snrs: vec![10.0],
            seeds: vec![0],
        };
        let a = run_sweep(&models, &grid, f.data.test()).unwrap();
        assert_eq!(a.cells.len(), 1);
        assert_eq!(a.cells[0].samples, 8);
        assert!(a.aggregates_consistent());
        let b = run_sweep(&models, &grid, f.data.test()).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.records_csv().unwrap(), b.records_csv().unwrap());

        let mut wide = grid.clone();
        wide.channels.push(ChannelKind::Rayleigh);
        wide.cbrs.push(0.25);
        match run_sweep(&models, &wide, f.data.test()) {
            Err(Error::MissingCells(m)) => assert_eq!(m.len(), 3),
            other => panic!("expected missing cells, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tampered_aggregate_detected() {
        let f = fixture();
        let models = [TrainedModel {
            channel: ChannelKind::Rayleigh,
            cbr: 0.0625,
            pipeline: Pipeline {
                source: &f.source,
                channel: &f.channel,
                spec: &f.spec,
            },
        }];
        let grid = SweepGrid {
            channels: vec![ChannelKind::Rayleigh],
            cbrs: vec![0.0625],
            snrs: vec![5.0, 15.0],
            seeds: vec![0, 1],
        };
        let mut r = run_sweep(&models, &grid, f.data.test()).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!(r.cell(ChannelKind::Rayleigh, 0.0625, 15.0, 1).is_some());
        r.cells[2].mean_psnr += 1e-3;
        assert!(!r.aggregates_consistent());
    }
}
