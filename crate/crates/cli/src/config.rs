//! Experiment configuration files.
//!
//! A config is a TOML document made of flat sections. Unknown keys anywhere are
//! rejected. Every section except `[grid]`, `[detector]` and `[time]` may be omitted.
//!
//! ```toml
//! seed = 0                  # RNG seed for noise and power iteration
//! output = "out"            # artifact directory
//!
//! [grid]
//! half_width = 3.75         # square is [-L, L]²
//! n = 129                   # nodes per axis
//! pml_width = 0.5
//!
//! [speed]
//! kind = "paper_default"    # or "constant" (c0 = ..) or "radial_bump" (amplitude, sigma)
//!
//! [phantom]
//! margin = 0.05
//!
//! [[phantom.component]]
//! kind = "disc"             # center, radius, taper, amp
//! center = [-0.2, 0.1]
//! radius = 0.45
//! taper = 0.25
//!
//! [[phantom.component]]
//! kind = "gaussian"         # center, sigma, amp
//! center = [0.35, -0.3]
//! sigma = 0.12
//! amp = 0.8
//!
//! [detector]
//! mode = "large"            # "small" also needs big_r
//! r = 2.0
//! n_theta = 180
//! n_alpha = 256
//! interp = "bilinear"       # or "cubic"
//!
//! [aperture]
//! arc = [-1.5707963, 0.0]   # omit for the full circle
//! taper = 0.1               # angular taper fraction at each arc end
//! times = [0.0, 5.0]        # visibility window for |t|; defaults to [0, time.record]
//!
//! [time]
//! record = 5.0              # T1, end of the recording
//! plateau = 4.5             # T, end of the plateau of the time cutoff
//! cfl = 0.5
//!
//! [recon]
//! method = "cg"             # or "landweber"
//! iters = 15
//! step = 0.01               # Landweber step; omitted means 1/‖A‖²
//! tol = 1e-6
//! tikhonov = 0.0
//!
//! [noise]
//! relative = 0.01           # Gaussian noise std as a fraction of max |data|
//!
//! [visibility]
//! threshold = 0.5           # edge threshold relative to max |∇f|
//! t_max = 8.0
//! ray_step = 0.002
//!
//! [sweep]
//! kind = "small"            # "small" varies R at fixed ring_radius, "large" varies r
//! ring_radius = 0.8
//! radius = 2.1              # middle radius of the three-point stencil
//! dr = 0.1
//! theta_range = [-0.2, 0.2]
//! dtheta = 0.05
//! n_alpha = 128
//! levels = 3
//! interp = "cubic"
//! record = 3.0
//! ```

use std::path::{Path, PathBuf};

use circtat_core::detector::{DetectorConfig, DetectorMode};
use circtat_core::wave::PmlProfile;
use circtat_core::{
    make_grid, make_phantom, sample_speed, Component, Grid2D, Interp, Phantom, PhantomSpec, SpeedField, SpeedSpec, Vec2,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub grid: GridConfig,
    #[serde(default)]
    pub speed: SpeedConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    pub detector: DetectorSection,
    #[serde(default)]
    pub aperture: ApertureConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub visibility: VisibilityConfig,
    pub sweep: Option<SweepConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub n: usize,
    #[serde(default = "default_pml_width")]
    pub pml_width: f64,
}

fn default_pml_width() -> f64 {
    0.5
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedConfig {
    Constant {
        c0: f64,
    },
    #[default]
    PaperDefault,
    RadialBump {
        amplitude: f64,
        sigma: f64,
    },
}

impl SpeedConfig {
    pub fn spec(&self) -> SpeedSpec {
        match *self {
            SpeedConfig::Constant { c0 } => SpeedSpec::Constant(c0),
            SpeedConfig::PaperDefault => SpeedSpec::PaperDefault,
            SpeedConfig::RadialBump { amplitude, sigma } => SpeedSpec::RadialBump { amplitude, sigma },
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub component: Vec<ComponentConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { margin: default_margin(), component: Vec::new() }
    }
}

fn default_margin() -> f64 {
    circtat_core::field::DEFAULT_MARGIN
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentConfig {
    Gaussian {
        center: [f64; 2],
        sigma: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Disc {
        center: [f64; 2],
        radius: f64,
        taper: f64,
        #[serde(default = "one")]
        amp: f64,
    },
}

impl ComponentConfig {
    fn component(&self) -> Component {
        match *self {
            ComponentConfig::Gaussian { center, sigma, amp } => {
                Component::Gaussian { center: Vec2::new(center[0], center[1]), sigma, amp }
            }
            ComponentConfig::Disc { center, radius, taper, amp } => {
                Component::SmoothedDisc { center: Vec2::new(center[0], center[1]), radius, taper, amp }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpName {
    #[default]
    Bilinear,
    Cubic,
}

impl InterpName {
    pub fn interp(self) -> Interp {
        match self {
            InterpName::Bilinear => Interp::Bilinear,
            InterpName::Cubic => Interp::Cubic,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub mode: ModeName,
    pub big_r: Option<f64>,
    pub r: f64,
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
    #[serde(default = "default_n_alpha")]
    pub n_alpha: usize,
    #[serde(default)]
    pub interp: InterpName,
}

fn default_n_theta() -> usize {
    circtat_core::detector::DEFAULT_N_THETA
}

fn default_n_alpha() -> usize {
    circtat_core::detector::DEFAULT_N_ALPHA
}

impl DetectorSection {
    pub fn mode(&self) -> Result<DetectorMode, CliError> {
        let mode = match (self.mode, self.big_r) {
            (ModeName::Small, Some(big_r)) => DetectorMode::Small { big_r, r: self.r },
            (ModeName::Small, None) => return Err(CliError::Config("detector: small mode needs big_r".into())),
            (ModeName::Large, None) => DetectorMode::Large { r: self.r },
            (ModeName::Large, Some(_)) => {
                return Err(CliError::Config("detector: big_r is only meaningful in small mode".into()))
            }
        };
        mode.validate().map_err(|e| CliError::Config(format!("detector: {e}")))?;
        Ok(mode)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureConfig {
    pub arc: Option<[f64; 2]>,
    #[serde(default = "default_taper")]
    pub taper: f64,
    pub times: Option<[f64; 2]>,
}

impl Default for ApertureConfig {
    fn default() -> Self {
        Self { arc: None, taper: default_taper(), times: None }
    }
}

fn default_taper() -> f64 {
    0.1
}

impl ApertureConfig {
    pub fn arc(&self) -> Option<(f64, f64)> {
        self.arc.map(|[a, b]| (a, b))
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub record: f64,
    pub plateau: Option<f64>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    circtat_core::wave::DEFAULT_CFL
}

impl TimeConfig {
    /// Plateau end `T`; defaults to 90% of the record length.
    pub fn plateau(&self) -> f64 {
        self.plateau.unwrap_or(0.9 * self.record)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Landweber,
    Cg,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_iters")]
    pub iters: usize,
    pub step: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub tikhonov: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { method: default_method(), iters: default_iters(), step: None, tol: default_tol(), tikhonov: 0.0 }
    }
}

fn default_method() -> Method {
    Method::Cg
}

fn default_iters() -> usize {
    15
}

fn default_tol() -> f64 {
    circtat_core::recon::DEFAULT_TOL
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub relative: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub t_max: Option<f64>,
    #[serde(default = "default_ray_step")]
    pub ray_step: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self { threshold: default_threshold(), t_max: None, ray_step: default_ray_step() }
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_ray_step() -> f64 {
    2e-3
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: ModeName,
    pub ring_radius: Option<f64>,
    pub radius: f64,
    pub dr: f64,
    pub theta_range: [f64; 2],
    pub dtheta: f64,
    #[serde(default = "default_sweep_alpha")]
    pub n_alpha: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub interp: InterpName,
    pub record: f64,
}

fn default_sweep_alpha() -> usize {
    128
}

fn default_levels() -> usize {
    3
}

impl SweepConfig {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(format!("sweep: {msg}")));
        match (self.kind, self.ring_radius) {
            (ModeName::Small, None) => return bad("small sweeps need ring_radius".into()),
            (ModeName::Large, Some(_)) => return bad("ring_radius is only meaningful for small sweeps".into()),
            (ModeName::Small, Some(r)) => {
                DetectorMode::Small { big_r: self.radius - self.dr, r }
                    .validate()
                    .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
            }
            (ModeName::Large, None) => {
                DetectorMode::Large { r: self.radius - self.dr }
                    .validate()
                    .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
            }
        }
        if !(self.dr > 0.0) || !(self.dtheta > 0.0) || !(self.record > 0.0) {
            return bad(format!("dr {}, dtheta {} and record {} must be positive", self.dr, self.dtheta, self.record));
        }
        if self.theta_range[1] - self.theta_range[0] < 2.0 * self.dtheta {
            return bad("theta_range must span at least three angles".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Config(format!("config not found: {}", path.display())),
            _ => CliError::Config(format!("cannot read config {}: {e}", path.display())),
        })?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            components: self.phantom.component.iter().map(ComponentConfig::component).collect(),
            margin: self.phantom.margin,
        }
    }

    pub fn has_truth(&self) -> bool {
        !self.phantom.component.is_empty()
    }

    pub fn detector(&self) -> Result<DetectorConfig, CliError> {
        let mode = self.detector.mode()?;
        let d = &self.detector;
        let cfg = match self.aperture.arc() {
            None => DetectorConfig::full(mode, d.n_theta, d.n_alpha),
            Some(arc) => DetectorConfig::arc(mode, arc, d.n_theta, d.n_alpha),
        };
        Ok(cfg.map_err(|e| CliError::Config(format!("detector: {e}")))?.with_interp(d.interp.interp()))
    }

    /// Visibility time window `U`.
    pub fn visibility_times(&self) -> (f64, f64) {
        self.aperture.times.map(|[a, b]| (a, b)).unwrap_or((0.0, self.time.record))
    }

    /// Checks every section and builds the sampled inputs.
    pub fn build(&self) -> Result<Experiment, CliError> {
        let cfg_err = |what: &'static str| move |e: circtat_core::Error| CliError::Config(format!("{what}: {e}"));
        let grid = make_grid(self.grid.half_width, self.grid.n, self.grid.pml_width).map_err(cfg_err("grid"))?;
        let speed_spec = self.speed.spec();
        speed_spec.validate().map_err(cfg_err("speed"))?;
        let speed = sample_speed(&speed_spec, &grid).map_err(cfg_err("speed"))?;
        let phantom = make_phantom(&self.phantom_spec(), &grid).map_err(cfg_err("phantom"))?;
        let pml = PmlProfile::for_grid(&grid).map_err(cfg_err("grid"))?;
        let detector = self.detector()?;
        // every ring point has to sit inside the undamped square
        if detector.mode.outer_extent() >= grid.interior_limit() {
            return Err(CliError::Config(format!(
                "detector: rings reach |x| = {:.4}, but the absorbing band starts at {:.4}; enlarge grid.half_width",
                detector.mode.outer_extent(),
                grid.interior_limit()
            )));
        }
        let t = &self.time;
        if !(t.record > 0.0) || !(t.plateau() > 0.0 && t.plateau() < t.record) {
            return Err(CliError::Config(format!(
                "time: need 0 < plateau < record, got plateau {} and record {}",
                t.plateau(),
                t.record
            )));
        }
        if !(t.cfl > 0.0 && t.cfl <= 1.0) {
            return Err(CliError::Config(format!("time: cfl {} must lie in (0, 1]", t.cfl)));
        }
        if !(0.0..0.5).contains(&self.aperture.taper) {
            return Err(CliError::Config(format!("aperture: taper {} must lie in [0, 0.5)", self.aperture.taper)));
        }
        let (u0, u1) = self.visibility_times();
        if !(u0 >= 0.0 && u1 > u0) {
            return Err(CliError::Config(format!("aperture: times [{u0}, {u1}] must satisfy 0 ≤ u0 < u1")));
        }
        let r = &self.recon;
        if r.iters == 0 || !(r.tol >= 0.0) || !(r.tikhonov >= 0.0) || r.step.is_some_and(|s| !(s > 0.0)) {
            return Err(CliError::Config(format!(
                "recon: need iters ≥ 1, tol ≥ 0, tikhonov ≥ 0 and a positive step, got {r:?}"
            )));
        }
        if r.tikhonov > 0.0 && r.method == Method::Landweber {
            return Err(CliError::Config("recon: the tikhonov penalty is only available with method = \"cg\"".into()));
        }
        if !(self.noise.relative >= 0.0 && self.noise.relative.is_finite()) {
            return Err(CliError::Config(format!("noise: relative level {} must be ≥ 0", self.noise.relative)));
        }
        let v = &self.visibility;
        if !(v.threshold > 0.0 && v.threshold <= 1.0) || !(v.ray_step > 0.0) || v.t_max.is_some_and(|t| !(t > 0.0)) {
            return Err(CliError::Config(format!(
                "visibility: need threshold in (0, 1], positive ray_step and t_max, got {v:?}"
            )));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(Experiment { grid, speed_spec, speed, phantom, pml, detector })
    }
}

/// Sampled inputs of one experiment.
pub struct Experiment {
    pub grid: Grid2D,
    pub speed_spec: SpeedSpec,
    pub speed: SpeedField,
    pub phantom: Phantom,
    pub pml: PmlProfile,
    pub detector: DetectorConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
half_width = 3.5
n = 65

[detector]
mode = "small"
big_r = 2.0
r = 0.8
n_theta = 16
n_alpha = 64

[time]
record = 3.0
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.speed.spec(), SpeedSpec::PaperDefault);
        assert_eq!(c.recon.method, Method::Cg);
        assert!(!c.has_truth());
        let e = c.build().unwrap();
        assert_eq!(e.detector.n_theta(), 16);
        assert_eq!(c.visibility_times(), (0.0, 3.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("n = 65", "n = 65\nsize = 2");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("size"), "{err}");
        let text = format!("{MINIMAL}\n[speed]\nkind = \"constant\"\nc0 = 1.2\nc1 = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn components_parse_by_kind() {
        let text = format!(
            "{MINIMAL}\n[[phantom.component]]\nkind = \"gaussian\"\ncenter = [0.1, 0.0]\nsigma = 0.1\n\n\
             [[phantom.component]]\nkind = \"disc\"\ncenter = [0.0, 0.0]\nradius = 0.3\ntaper = 0.1\namp = 2.0\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        let spec = c.phantom_spec();
        assert_eq!(spec.components.len(), 2);
        assert!(matches!(spec.components[1], Component::SmoothedDisc { amp, .. } if amp == 2.0));
        assert!(c.build().is_ok());
    }

    #[test]
    fn invariant_violations_name_the_section() {
        let cases = [
            (MINIMAL.replace("big_r = 2.0", "big_r = 1.5"), "detector"),
            (MINIMAL.replace("record = 3.0", "record = 3.0\nplateau = 4.0"), "time"),
            (MINIMAL.replace("half_width = 3.5", "half_width = 3.0"), "detector"),
            (
                format!("{MINIMAL}\n[[phantom.component]]\nkind = \"gaussian\"\ncenter = [0.8, 0.0]\nsigma = 0.1\n"),
                "phantom",
            ),
            (format!("{MINIMAL}\n[recon]\nmethod = \"landweber\"\ntikhonov = 1.0\n"), "recon"),
        ];
        for (text, section) in cases {
            let err = ExperimentConfig::parse(&text).unwrap().build().err().expect(section);
            assert!(err.to_string().starts_with(section), "{err}");
        }
    }
}
