//! Directional ablations on the synthetic benchmark.
//!
//! Three presets, each a list of rows that differ in one knob:
//!
//! * `table3`: stage-1 with and without the distance-field input, scored by
//!   binary IoU on the Visible region.
//! * `table4`: the visibility partition (`θ_d`, or out-of-view only),
//!   scored by full-grid mIoU of the two-stage completion.
//! * `table5`: the noise ranges `(R_h, R_d)` of stage-2 training at
//!   `θ_d = 2.5`, scored by full-grid mIoU.
//!
//! Every row is trained and evaluated once per seed; the reported value is
//! the median over the seeds that finished. Stage-1 networks are cached by
//! `(θ_d, distance field, seed)` so rows sharing them train once.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::eval::Confusion;
use crate::grid::VoxelGrid;
use crate::mae::{argmax_grid, depth_axis, train_mae, MaeConfig, MaeItem, MaeNet, NoiseSpec};
use crate::stage1::{prepare_sample, train_stage1, Stage1Config, Stage1Input, Stage1Net, TrainOptions};
use crate::synth::{estimate_depth, make_corpus, DepthError, Sample, SceneSpec};

/// Which ablation table to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Table3,
    Table4,
    Table5,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Table3 => "table3",
            Preset::Table4 => "table4",
            Preset::Table5 => "table5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table3" => Some(Preset::Table3),
            "table4" => Some(Preset::Table4),
            "table5" => Some(Preset::Table5),
            _ => None,
        }
    }

    /// Name of the score reported for this preset.
    pub fn metric(self) -> &'static str {
        match self {
            Preset::Table3 => "visible_iou",
            _ => "miou",
        }
    }

    /// The rows of the preset.
    pub fn rows(self) -> Vec<Row> {
        let base = Row { name: String::new(), theta_d: 3.5, use_udistance: true, noise: (0, 3) };
        match self {
            Preset::Table3 => vec![
                Row { name: "udistance".into(), ..base.clone() },
                Row { name: "udistance_zeroed".into(), use_udistance: false, ..base },
            ],
            Preset::Table4 => {
                let mut rows = vec![Row { name: "oov_only".into(), theta_d: f64::INFINITY, ..base.clone() }];
                for td in [1.5, 2.5, 3.5, 4.5] {
                    rows.push(Row { name: format!("theta_d_{td}"), theta_d: td, ..base.clone() });
                }
                rows
            }
            Preset::Table5 => [(0, 0), (0, 2), (0, 3), (0, 4), (1, 3), (1, 4)]
                .into_iter()
                .map(|(h, d)| Row { name: format!("rh{h}_rd{d}"), theta_d: 2.5, noise: (h, d), ..base.clone() })
                .collect(),
        }
    }
}

/// One configuration of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    /// Depth relaxation of the partition; infinity keeps only the
    /// out-of-view split.
    pub theta_d: f64,
    pub use_udistance: bool,
    /// `(R_h, R_d)` for stage-2 training.
    pub noise: (usize, usize),
}

/// Benchmark size, network shapes and schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub scene: SceneSpec,
    /// Error applied to the rendered depth before it reaches stage 1; the
    /// ground-truth grids stay exact.
    pub depth_error: DepthError,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Scene seeds of the evaluation split start here.
    pub eval_seed_base: u64,
    pub seeds: Vec<u64>,
    pub stage1: Stage1Config,
    pub stage1_opts: TrainOptions,
    pub mae: MaeConfig,
    pub mae_opts: TrainOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let scene = SceneSpec::bench();
        let k = scene.num_classes;
        Self {
            scene,
            depth_error: DepthError::default(),
            train_scenes: 100,
            eval_scenes: 30,
            eval_seed_base: 1_000_000,
            seeds: vec![0, 1, 2],
            stage1: Stage1Config { num_classes: k, depth_range: (0.2, 8.0), ..Default::default() },
            stage1_opts: TrainOptions { steps: 600, ..Default::default() },
            mae: MaeConfig { num_classes: k, ..Default::default() },
            mae_opts: TrainOptions { steps: 600, ..Default::default() },
        }
    }
}

/// Outcome of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub row: Row,
    /// Score per seed, `None` when that run failed.
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub errors: Vec<String>,
}

impl RowResult {
    /// Median over finished seeds (mean of the middle pair for even counts).
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.per_seed.iter().filter_map(|(_, s)| *s).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }

    pub fn failed(&self) -> bool {
        self.median().is_none()
    }
}

/// All rows of one preset.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub preset: Preset,
    pub rows: Vec<RowResult>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} ({}, median over seeds)\n", self.preset.name(), self.preset.metric());
        for r in &self.rows {
            let seeds: Vec<String> = r
                .per_seed
                .iter()
                .map(|(_, v)| v.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}")))
                .collect();
            match r.median() {
                Some(m) => writeln!(s, "{:<18} {:.4}  [{}]", r.row.name, m, seeds.join(", ")),
                None => writeln!(s, "{:<18} FAILED [{}]", r.row.name, r.errors.join("; ")),
            }
            .expect("write to string");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,seed,score\n");
        for r in &self.rows {
            for (seed, v) in &r.per_seed {
                let v = v.map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
                writeln!(s, "{},{},{}", r.row.name, seed, v).expect("write to string");
            }
            let m = r.median().map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
            writeln!(s, "{},median,{}", r.row.name, m).expect("write to string");
        }
        s
    }
}

type Stage1Key = (u64, bool, u64);

/// Holds the benchmark corpus and the trained stage-1 networks so that
/// several presets can share them.
pub struct AblationRunner {
    pub cfg: AblationConfig,
    train: Vec<Sample>,
    eval: Vec<Sample>,
    stage1: HashMap<Stage1Key, Stage1Net>,
}

impl AblationRunner {
    pub fn new(cfg: AblationConfig) -> Result<Self> {
        if cfg.train_scenes == 0 || cfg.eval_scenes == 0 || cfg.seeds.is_empty() {
            return contract("ablation needs training scenes, evaluation scenes and seeds");
        }
        if cfg.eval_seed_base < cfg.train_scenes as u64 {
            return contract("evaluation scene seeds overlap the training split");
        }
        let estimated = |mut samples: Vec<Sample>| {
            for s in &mut samples {
                s.depth = estimate_depth(&s.depth, &cfg.depth_error, s.seed);
            }
            samples
        };
        let train = estimated(make_corpus(&cfg.scene, 0..cfg.train_scenes as u64)?);
        let eval = estimated(make_corpus(&cfg.scene, cfg.eval_seed_base..cfg.eval_seed_base + cfg.eval_scenes as u64)?);
        Ok(Self { cfg, train, eval, stage1: HashMap::new() })
    }

    fn stage1_cfg(&self, row: &Row) -> Stage1Config {
        Stage1Config { theta_d: row.theta_d, use_udistance: row.use_udistance, ..self.cfg.stage1 }
    }

    fn prepare(&self, cfg: &Stage1Config, samples: &[Sample]) -> Result<Vec<Stage1Input>> {
        samples.iter().map(|s| prepare_sample(cfg, &self.cfg.scene.meta, s)).collect()
    }

    /// Trained stage-1 network for `row` and `seed` (cached).
    fn stage1_net(&mut self, row: &Row, seed: u64, train_inputs: &[Stage1Input]) -> Result<&mut Stage1Net> {
        let key = (row.theta_d.to_bits(), row.use_udistance, seed);
        if !self.stage1.contains_key(&key) {
            let cfg = self.stage1_cfg(row);
            let mut net = Stage1Net::new(cfg, seed);
            let opts = TrainOptions { seed, ..self.cfg.stage1_opts };
            train_stage1(train_inputs, &mut net, &opts)?;
            self.stage1.insert(key, net);
        }
        Ok(self.stage1.get_mut(&key).expect("inserted above"))
    }

    /// Runs every row of `preset`.
    pub fn run(&mut self, preset: Preset) -> Result<AblationReport> {
        self.run_rows(preset, &preset.rows())
    }

    /// Runs the given rows, scored the way `preset` scores them. A run that
    /// fails marks its seed as failed instead of aborting the table.
    pub fn run_rows(&mut self, preset: Preset, rows: &[Row]) -> Result<AblationReport> {
        let mut results = Vec::new();
        for row in rows {
            let cfg = self.stage1_cfg(row);
            let train_inputs = self.prepare(&cfg, &self.train)?;
            let eval_inputs = self.prepare(&cfg, &self.eval)?;
            let mut per_seed = Vec::new();
            let mut errors = Vec::new();
            for seed in self.cfg.seeds.clone() {
                let score = match preset {
                    Preset::Table3 => self.score_stage1(row, seed, &train_inputs, &eval_inputs),
                    _ => self.score_completion(row, seed, &train_inputs, &eval_inputs),
                };
                match score {
                    Ok(v) => per_seed.push((seed, Some(v))),
                    Err(e) => {
                        log::warn!("ablation row {} seed {seed} failed: {e}", row.name);
                        errors.push(format!("seed {seed}: {e}"));
                        per_seed.push((seed, None));
                    }
                }
                log::info!("{} {} seed {seed}: {:?}", preset.name(), row.name, per_seed.last().map(|p| p.1));
            }
            results.push(RowResult { row: row.clone(), per_seed, errors });
        }
        Ok(AblationReport { preset, rows: results })
    }

    fn score_stage1(&mut self, row: &Row, seed: u64, train: &[Stage1Input], eval: &[Stage1Input]) -> Result<f64> {
        let k = self.cfg.scene.num_classes;
        let eval_gt: Vec<VoxelGrid> = self.eval.iter().map(|s| s.grid.clone()).collect();
        let net = self.stage1_net(row, seed, train)?;
        let mut cm = Confusion::new(k);
        for (input, gt) in eval.iter().zip(&eval_gt) {
            let out = net.forward(input)?;
            cm.add(&crate::eval::confusion(&out.o_v, gt, k, |i| input.mask.is_visible(i))?)?;
        }
        Ok(cm.iou())
    }

    fn score_completion(&mut self, row: &Row, seed: u64, train: &[Stage1Input], eval: &[Stage1Input]) -> Result<f64> {
        let k = self.cfg.scene.num_classes;
        let train_gt: Vec<VoxelGrid> = self.train.iter().map(|s| s.grid.clone()).collect();
        let eval_gt: Vec<VoxelGrid> = self.eval.iter().map(|s| s.grid.clone()).collect();
        let mae_cfg = self.cfg.mae;
        let mae_opts = TrainOptions { seed, ..self.cfg.mae_opts };
        let use_context = mae_cfg.context_channels > 0;
        let net = self.stage1_net(row, seed, train)?;
        if use_context && net.cfg.ctx_channels != mae_cfg.context_channels {
            return contract("stage-2 context width differs from the stage-1 context features");
        }
        let mut items = Vec::with_capacity(train.len());
        for (input, gt) in train.iter().zip(&train_gt) {
            let context = if use_context { Some(net.forward(input)?.f3d2) } else { None };
            items.push(MaeItem {
                visible_labels: gt.clone(),
                mask: input.mask.clone(),
                gt: gt.clone(),
                context,
                depth_axis: depth_axis(&input.camera),
            });
        }
        let mut stage1_outs = Vec::with_capacity(eval.len());
        for input in eval {
            stage1_outs.push(net.forward(input)?);
        }
        let spec = NoiseSpec { r_h: row.noise.0, r_d: row.noise.1, weights: vec![1.0; mae_cfg.levels] };
        let mut mae = MaeNet::new(mae_cfg, seed);
        train_mae(&items, &mut mae, &spec, &mae_opts)?;
        let t = spec.highest_level();
        let mut cm = Confusion::new(k);
        for (out, gt) in stage1_outs.iter().zip(&eval_gt) {
            let context = use_context.then_some(&out.f3d2);
            let logits = mae.forward(&out.o_v, &out.mask, t, context)?;
            let pred = argmax_grid(&logits, gt);
            cm.add(&crate::eval::confusion(&pred, gt, k, |_| true)?)?;
        }
        Ok(cm.miou())
    }
}

/// Builds the benchmark and runs one preset.
pub fn run_ablation(preset: Preset, cfg: AblationConfig) -> Result<AblationReport> {
    AblationRunner::new(cfg)?.run(preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_rows() {
        let names = |p: Preset| p.rows().into_iter().map(|r| r.name).collect::<Vec<_>>();
        assert_eq!(names(Preset::Table3), ["udistance", "udistance_zeroed"]);
        assert_eq!(Preset::Table4.rows().len(), 5);
        assert!(Preset::Table4.rows()[0].theta_d.is_infinite());
        let t5 = Preset::Table5.rows();
        assert_eq!(t5.len(), 6);
        assert!(t5.iter().all(|r| r.theta_d == 2.5));
        assert_eq!(t5[0].noise, (0, 0));
        for p in [Preset::Table3, Preset::Table4, Preset::Table5] {
            assert_eq!(Preset::parse(p.name()), Some(p));
        }
    }

    #[test]
    fn median_skips_failures() {
        let row = Preset::Table3.rows().remove(0);
        let r = RowResult { row: row.clone(), per_seed: vec![(0, Some(0.3)), (1, None), (2, Some(0.5))], errors: vec![] };
        assert_eq!(r.median(), Some(0.4));
        let r = RowResult { row, per_seed: vec![(0, None)], errors: vec!["x".into()] };
        assert!(r.failed());
        let rep = AblationReport { preset: Preset::Table3, rows: vec![r] };
        assert!(rep.to_text().contains("FAILED"));
        assert!(rep.to_csv().contains("median,failed"));
    }

    #[test]
    fn tiny_run_completes() {
        let cfg = AblationConfig {
            train_scenes: 2,
            eval_scenes: 1,
            seeds: vec![0],
            stage1_opts: TrainOptions { steps: 2, ..Default::default() },
            mae_opts: TrainOptions { steps: 2, ..Default::default() },
            ..Default::default()
        };
        let mut runner = AblationRunner::new(cfg).unwrap();
        let rows = Preset::Table5.rows();
        let rep = runner.run_rows(Preset::Table5, &rows[..1]).unwrap();
        let m = rep.rows[0].median().unwrap();
        assert!((0.0..=1.0).contains(&m));
        let rep = runner.run_rows(Preset::Table3, &Preset::Table3.rows()).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| !r.failed()));
    }
}
