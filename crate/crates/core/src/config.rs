//! Run configuration in a plain `key = value` format with `[section]`
//! headers and `#` comments. Unknown sections or keys are errors.
//!
//! ```text
//! [scene]
//! preset = bench
//!
//! [visibility]
//! theta_d = 2.5       # "inf" keeps only the out-of-view split
//!
//! [stage2]
//! r_h = 0
//! r_d = 3
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::AblationConfig;
use crate::error::{Error, Result};
use crate::grid::GridMeta;
use crate::mae::{MaeConfig, NoiseSpec};
use crate::stage1::{Stage1Config, TrainOptions};
use crate::synth::{DepthError, SceneSpec};

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `desk` or `bench`: the scene distribution and grid.
    pub preset: String,
    pub scene: SceneSpec,
    /// Simulated depth-estimation error of the ablation benchmark.
    pub depth_error: DepthError,
    pub stage1: Stage1Config,
    pub stage1_opts: TrainOptions,
    pub mae: MaeConfig,
    pub mae_opts: TrainOptions,
    pub noise: NoiseSpec,
    pub seeds: Vec<u64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_seed_base: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset("desk").expect("desk preset exists")
    }
}

fn scene_preset(name: &str) -> Option<SceneSpec> {
    match name {
        "desk" => Some(SceneSpec::desk()),
        "bench" => Some(SceneSpec::bench()),
        _ => None,
    }
}

impl RunConfig {
    /// Defaults for the `desk` or `bench` scene distribution.
    pub fn for_preset(name: &str) -> Result<Self> {
        let scene = scene_preset(name).ok_or_else(|| Error::Config(format!("unknown scene preset {name:?}")))?;
        let ab = AblationConfig { scene: scene.clone(), ..Default::default() };
        Ok(Self {
            preset: name.to_string(),
            stage1: Stage1Config {
                num_classes: scene.num_classes,
                depth_range: if name == "desk" { Stage1Config::default().depth_range } else { ab.stage1.depth_range },
                ..ab.stage1
            },
            mae: MaeConfig { num_classes: scene.num_classes, ..ab.mae },
            scene,
            depth_error: ab.depth_error,
            stage1_opts: ab.stage1_opts,
            mae_opts: ab.mae_opts,
            noise: NoiseSpec::new(0, 3),
            seeds: ab.seeds,
            train_scenes: ab.train_scenes,
            eval_scenes: ab.eval_scenes,
            eval_seed_base: ab.eval_seed_base,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses a config text on top of the defaults of its `scene.preset`
    /// (desk when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let preset = entries.iter().find(|e| e.key == "scene.preset").map_or("desk", |e| e.value.as_str());
        let mut cfg = Self::for_preset(preset).map_err(|_| Error::Config(format!("unknown scene preset {preset:?}")))?;
        for e in &entries {
            cfg.set(&e.key, &e.value).map_err(|m| Error::Config(format!("line {}: {}: {m}", e.line, e.key)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let mut meta = self.scene.meta;
        match key {
            "scene.preset" => {}
            "scene.base_seed" => self.scene.base_seed = num(v)?,
            "scene.depth_error_scale" => self.depth_error.scale = num(v)?,
            "scene.depth_error_offset" => self.depth_error.offset = num(v)?,
            "scene.depth_error_jitter" => self.depth_error.jitter = num(v)?,
            "scene.num_classes" => {
                let k: usize = num(v)?;
                self.scene.num_classes = k;
                self.stage1.num_classes = k;
                self.mae.num_classes = k;
            }
            "grid.origin" => meta.origin = triple(v)?,
            "grid.voxel_size" => meta.voxel_size = num(v)?,
            "grid.dims" => {
                let d: [f64; 3] = triple(v)?.map(f64::from);
                if d.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                    return Err("dims must be positive integers".into());
                }
                meta.dims = d.map(|x| x as usize);
            }
            "visibility.theta_d" => self.stage1.theta_d = theta(v)?,
            "visibility.gamma" => self.stage1.gamma = num(v)?,
            "visibility.theta" => self.stage1.theta = num(v)?,
            "stage1.image_channels" => self.stage1.image_channels = num(v)?,
            "stage1.geo_channels" => self.stage1.geo_channels = num(v)?,
            "stage1.ctx_channels" => self.stage1.ctx_channels = num(v)?,
            "stage1.deform_samples" => self.stage1.deform_samples = num(v)?,
            "stage1.depth_bins" => self.stage1.depth_bins = num(v)?,
            "stage1.depth_min" => self.stage1.depth_range.0 = num(v)?,
            "stage1.depth_max" => self.stage1.depth_range.1 = num(v)?,
            "stage1.use_udistance" => self.stage1.use_udistance = boolean(v)?,
            "stage1.steps" => self.stage1_opts.steps = num(v)?,
            "stage1.lr" => self.stage1_opts.lr = num(v)?,
            "stage1.momentum" => self.stage1_opts.momentum = num(v)?,
            "stage1.clip_norm" => self.stage1_opts.clip_norm = optional(v)?,
            "stage2.r_h" => self.noise.r_h = num(v)?,
            "stage2.r_d" => self.noise.r_d = num(v)?,
            "stage2.levels" => {
                let l: usize = num(v)?;
                self.noise.weights = vec![1.0; l];
                self.mae.levels = l;
            }
            "stage2.level_weights" => {
                let w = list::<f64>(v)?;
                self.mae.levels = w.len();
                self.noise.weights = w;
            }
            "stage2.context" => self.mae.context_channels = if boolean(v)? { self.stage1.ctx_channels } else { 0 },
            "stage2.embed" => self.mae.embed = num(v)?,
            "stage2.widths" => {
                let w = list::<usize>(v)?;
                self.mae.widths = w.try_into().map_err(|_| "expected three widths".to_string())?;
            }
            "stage2.steps" => self.mae_opts.steps = num(v)?,
            "stage2.lr" => self.mae_opts.lr = num(v)?,
            "stage2.momentum" => self.mae_opts.momentum = num(v)?,
            "stage2.clip_norm" => self.mae_opts.clip_norm = optional(v)?,
            "run.seeds" => self.seeds = list(v)?,
            "run.train_scenes" => self.train_scenes = num(v)?,
            "run.eval_scenes" => self.eval_scenes = num(v)?,
            "run.eval_seed_base" => self.eval_seed_base = num(v)?,
            "run.data_dir" => self.data_dir = PathBuf::from(v),
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err("unknown key".into()),
        }
        if key.starts_with("grid.") {
            self.scene.meta = GridMeta::new(meta.origin, meta.voxel_size, meta.dims).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Range checks that do not depend on data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.stage1.theta_d >= 0.0) {
            return bad(format!("theta_d must be >= 0, got {}", self.stage1.theta_d));
        }
        if !(self.stage1.gamma > 0.0 && self.stage1.theta > 0.0) {
            return bad("gamma and theta must be positive".into());
        }
        let (lo, hi) = self.stage1.depth_range;
        if !(lo > 0.0 && hi > lo) || self.stage1.depth_bins == 0 {
            return bad(format!("bad depth bins: {} over [{lo}, {hi}]", self.stage1.depth_bins));
        }
        if self.noise.weights.is_empty() || self.noise.weights.iter().any(|w| !(*w >= 0.0)) || self.noise.weights.iter().all(|w| *w == 0.0) {
            return bad("noise level weights must be non-negative with a positive sum".into());
        }
        for (name, o) in [("stage1", &self.stage1_opts), ("stage2", &self.mae_opts)] {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) {
                return bad(format!("{name}: lr must be positive and momentum in [0, 1)"));
            }
        }
        let e = self.depth_error;
        if !((0.0..1.0).contains(&e.scale) && (0.0..1.0).contains(&e.jitter) && e.offset >= 0.0) {
            return bad(format!("depth error scale and jitter must be in [0, 1) and offset >= 0, got {e:?}"));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.scene.meta.dims.iter().any(|d| d % 8 != 0) {
            return bad(format!("grid dims {:?} must be multiples of 8", self.scene.meta.dims));
        }
        if self.mae.context_channels != 0 && self.mae.context_channels != self.stage1.ctx_channels {
            return bad("stage-2 context width must match stage1.ctx_channels".into());
        }
        Ok(())
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.scene.meta;
        let f = |x: f64| if x.is_infinite() { "inf".to_string() } else { x.to_string() };
        let opt = |x: Option<f32>| x.map_or_else(|| "none".to_string(), |v| v.to_string());
        let join = |v: &[String]| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(
            s,
            "[scene]\npreset = {}\nbase_seed = {}\nnum_classes = {}\ndepth_error_scale = {}\ndepth_error_offset = {}\ndepth_error_jitter = {}\n",
            self.preset,
            self.scene.base_seed,
            self.scene.num_classes,
            self.depth_error.scale,
            self.depth_error.offset,
            self.depth_error.jitter
        );
        let _ = writeln!(
            s,
            "[grid]\norigin = {}, {}, {}\nvoxel_size = {}\ndims = {}, {}, {}\n",
            m.origin[0], m.origin[1], m.origin[2], m.voxel_size, m.dims[0], m.dims[1], m.dims[2]
        );
        let c = &self.stage1;
        let _ = writeln!(s, "[visibility]\ntheta_d = {}\ngamma = {}\ntheta = {}\n", f(c.theta_d), c.gamma, c.theta);
        let _ = writeln!(
            s,
            "[stage1]\nimage_channels = {}\ngeo_channels = {}\nctx_channels = {}\ndeform_samples = {}\ndepth_bins = {}\ndepth_min = {}\ndepth_max = {}\nuse_udistance = {}\nsteps = {}\nlr = {}\nmomentum = {}\nclip_norm = {}\n",
            c.image_channels, c.geo_channels, c.ctx_channels, c.deform_samples, c.depth_bins, c.depth_range.0, c.depth_range.1,
            c.use_udistance, self.stage1_opts.steps, self.stage1_opts.lr, self.stage1_opts.momentum, opt(self.stage1_opts.clip_norm)
        );
        let weights: Vec<String> = self.noise.weights.iter().map(|w| w.to_string()).collect();
        let widths: Vec<String> = self.mae.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(
            s,
            "[stage2]\nr_h = {}\nr_d = {}\nlevel_weights = {}\ncontext = {}\nembed = {}\nwidths = {}\nsteps = {}\nlr = {}\nmomentum = {}\nclip_norm = {}\n",
            self.noise.r_h, self.noise.r_d, join(&weights), self.mae.context_channels > 0, self.mae.embed, join(&widths),
            self.mae_opts.steps, self.mae_opts.lr, self.mae_opts.momentum, opt(self.mae_opts.clip_norm)
        );
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            s,
            "[run]\nseeds = {}\ntrain_scenes = {}\neval_scenes = {}\neval_seed_base = {}\ndata_dir = {}\nout_dir = {}",
            join(&seeds), self.train_scenes, self.eval_scenes, self.eval_seed_base, self.data_dir.display(), self.out_dir.display()
        );
        s
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            scene: self.scene.clone(),
            depth_error: self.depth_error,
            train_scenes: self.train_scenes,
            eval_scenes: self.eval_scenes,
            eval_seed_base: self.eval_seed_base,
            seeds: self.seeds.clone(),
            stage1: self.stage1,
            stage1_opts: self.stage1_opts,
            mae: self.mae,
            mae_opts: self.mae_opts,
        }
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    const SECTIONS: [&str; 6] = ["scene", "grid", "visibility", "stage1", "stage2", "run"];
    let mut section: Option<String> = None;
    let mut out: Vec<Entry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let sec = section.as_ref().ok_or_else(|| Error::Config(format!("line {}: key outside a section", n + 1)))?;
        let key = format!("{sec}.{}", k.trim());
        if out.iter().any(|e| e.key == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
        }
        out.push(Entry { line: n + 1, key, value: v.trim().to_string() });
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{v:?}: {e}"))
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|x| num(x.trim())).collect()
}

fn triple(v: &str) -> std::result::Result<[f32; 3], String> {
    list::<f32>(v)?.try_into().map_err(|_| "expected three numbers".to_string())
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?} is not true or false")),
    }
}

fn theta(v: &str) -> std::result::Result<f64, String> {
    if v == "inf" {
        Ok(f64::INFINITY)
    } else {
        num(v)
    }
}

fn optional(v: &str) -> std::result::Result<Option<f32>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::for_preset("bench").unwrap();
        cfg.stage1.theta_d = f64::INFINITY;
        cfg.noise.r_h = 1;
        cfg.mae_opts.clip_norm = None;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("[scene]\npreset = bench\n[visibility]\ntheta_d = 2.5 # relaxed\n[stage2]\nr_d = 4\nlevels = 3\n").unwrap();
        assert_eq!(cfg.scene.meta.dims, [32, 32, 8]);
        assert_eq!(cfg.stage1.theta_d, 2.5);
        assert_eq!(cfg.noise.r_d, 4);
        assert_eq!(cfg.mae.levels, 3);
        assert_eq!(cfg.noise.levels(), 3);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "[stage1]\nbogus = 1",
            "[nope]\n",
            "theta_d = 1",
            "[visibility]\ntheta_d = -1",
            "[visibility]\ntheta_d = x",
            "[stage1]\nlr = 0",
            "[stage1]\nlr = 0.1\nlr = 0.2",
            "[grid]\ndims = 10, 8, 8",
            "[scene]\npreset = moon",
            "[stage2]\nwidths = 1, 2",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text:?}");
        }
    }
}
