//! Synthetic multi-scenario multi-task panels.
//!
//! Each advertiser carries a latent state z = (z_lvl, z_tr): level factors
//! that set where its daily activity sits, and trend factors that tilt it
//! over time. One advertiser's potential outcomes exist in every scenario;
//! a sample materializes one (advertiser, scenario, anchor day) triple as a
//! T-day observation window plus next-horizon label counts per task.
//!
//! Scenario structure enters in two places:
//!
//! * **Labels.** Per task, a correlation matrix over scenarios is installed
//!   in the latent layer (after compensating for observation noise and
//!   Poisson dilution, see [`corr`]), then horizon rates are
//!   `mean * clamp(1 + cv * x)` and labels are Poisson draws.
//! * **Observations.** Each channel loads on the latent factors through a
//!   per-scenario unit vector: a shared axis blended with a scenario-private
//!   rotation by `private_frac`. Trend factors enter through a ramp that is
//!   centered on the window, so window means carry no trend signal; only the
//!   within-window dynamics do.
//!
//! Generation is deterministic for a seed, and embarrassingly parallel in
//! principle: every advertiser's stream is derived independently from
//! (seed, advertiser index). This build runs it single-threaded.

pub mod buckets;
pub mod corr;
pub mod io;
pub mod split;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("correlation matrix is not positive semidefinite (pivot {pivot} = {value:.3e})")]
    NotPositiveSemidefinite { pivot: usize, value: f64 },
    #[error(
        "correlation target {target} infeasible: needs latent correlation {latent:.3} beyond ±1 \
         (weaken the target, raise the task mean, or lower the noise)"
    )]
    InfeasibleCorrelation { target: f64, latent: f64 },
    #[error("correlation undefined: a series has zero variance")]
    ZeroVariance,
    #[error("too few distinct days for the requested split: {0}")]
    TooFewDays(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One (advertiser, scenario, anchor day) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub advertiser_id: u64,
    pub scenario_id: u32,
    /// Categorical scenario descriptors: [scenario id, size bucket, traffic bucket].
    pub scenario_attrs: Vec<u32>,
    /// Categorical advertiser descriptors: [business scale, rating, category].
    pub profile: Vec<u32>,
    /// T rows of per-day behavior counts (logins, edits, …), one column per channel.
    pub behavior_seq: Vec<Vec<u64>>,
    /// T rows of per-day performance counts (spend units, impressions, …).
    pub performance_seq: Vec<Vec<u64>>,
    /// Next-horizon totals, one per task.
    pub labels: Vec<u64>,
    /// Anchor day: the window covers [day_index - T + 1, day_index], labels
    /// cover (day_index, day_index + horizon].
    pub day_index: u32,
    /// Latent horizon rates behind `labels`; the oracle a perfect model
    /// would predict.
    pub true_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    /// Mean horizon total in the reference scenario.
    pub base_mean: f64,
    /// Coefficient of variation of the latent rate around its mean.
    pub cv: f64,
    /// Target Pearson correlation of this task's labels across scenario
    /// pairs (unit diagonal, symmetric).
    pub rho: Vec<Vec<f64>>,
    /// Per-scenario multiplier on `base_mean`.
    pub mean_scale: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenConfig {
    /// Samples per scenario; length defines the scenario count S.
    pub scenario_counts: Vec<usize>,
    pub tasks: Vec<TaskSpec>,
    /// Observation window length T.
    pub seq_len: usize,
    /// Label horizon in days.
    pub horizon: usize,
    /// Calendar span; anchor days are drawn so window and horizon both fit.
    pub n_days: usize,
    /// Latent factor count per block (level and trend); at least S.
    pub latent_dim: usize,
    pub behavior_base: Vec<f64>,
    pub performance_base: Vec<f64>,
    /// Per-scenario multiplier on observation channel rates.
    pub obs_scale: Vec<f64>,
    /// Weight of scenario-private observation noise in labels, in [0, 1).
    pub noise: f64,
    /// Fraction of label signal variance carried by trend factors.
    pub trend_weight: f64,
    /// 0 = every scenario reads channels through the same axes; 1 = fully
    /// scenario-private observation geometry.
    pub private_frac: f64,
    /// Level-factor swing of channel rates, as a fraction of the base rate.
    pub obs_cv: f64,
    /// Trend-factor swing of channel rates across the window.
    pub trend_obs: f64,
    /// Weekly seasonality amplitude.
    pub season_amp: f64,
    /// Day-local rate noise.
    pub day_noise: f64,
    /// Rates are clamped below at this fraction of their base.
    pub rate_floor_frac: f64,
    /// Advertisers used to measure empirical cross-scenario correlations
    /// for the dataset metadata; 0 skips the measurement.
    pub corr_probes: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn n_scenarios(&self) -> usize {
        self.scenario_counts.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_channels(&self) -> usize {
        self.behavior_base.len() + self.performance_base.len()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    fn validate(&self) -> Result<(), DataError> {
        let s = self.n_scenarios();
        let err = |msg: String| Err(DataError::Config(msg));
        if s == 0 || self.scenario_counts.iter().any(|&c| c == 0) {
            return err("scenario_counts must be non-empty and positive".into());
        }
        if self.tasks.is_empty() {
            return err("at least one task required".into());
        }
        if self.seq_len < 2 || self.horizon == 0 {
            return err(format!(
                "need seq_len >= 2 and horizon >= 1, got {} and {}",
                self.seq_len, self.horizon
            ));
        }
        if self.n_days < self.seq_len + self.horizon {
            return err(format!(
                "n_days {} cannot fit window {} plus horizon {}",
                self.n_days, self.seq_len, self.horizon
            ));
        }
        if self.latent_dim < s {
            return err(format!(
                "latent_dim {} must be at least the scenario count {s}",
                self.latent_dim
            ));
        }
        if self.behavior_base.is_empty() && self.performance_base.is_empty() {
            return err("at least one observation channel required".into());
        }
        if self
            .behavior_base
            .iter()
            .chain(self.performance_base.iter())
            .any(|&b| !(b > 0.0))
        {
            return err("channel base rates must be positive".into());
        }
        if self.obs_scale.len() != s || self.obs_scale.iter().any(|&v| !(v > 0.0)) {
            return err(format!("obs_scale must hold {s} positive entries"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return err(format!("noise {} must sit in [0, 1)", self.noise));
        }
        if !(0.0..=1.0).contains(&self.trend_weight) || !(0.0..=1.0).contains(&self.private_frac) {
            return err("trend_weight and private_frac must sit in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.rate_floor_frac) {
            return err("rate_floor_frac must sit in [0, 1)".into());
        }
        for spec in &self.tasks {
            if !(spec.base_mean > 0.0 && spec.cv > 0.0) {
                return err(format!("task {}: base_mean and cv must be positive", spec.name));
            }
            if spec.mean_scale.len() != s || spec.mean_scale.iter().any(|&v| !(v > 0.0)) {
                return err(format!("task {}: mean_scale must hold {s} positive entries", spec.name));
            }
            if spec.rho.len() != s || spec.rho.iter().any(|r| r.len() != s) {
                return err(format!("task {}: rho must be {s}x{s}", spec.name));
            }
            for i in 0..s {
                if (spec.rho[i][i] - 1.0).abs() > 1e-12 {
                    return err(format!("task {}: rho diagonal must be 1", spec.name));
                }
                for j in 0..s {
                    let v = spec.rho[i][j];
                    if !(-1.0..=1.0).contains(&v) || (v - spec.rho[j][i]).abs() > 1e-12 {
                        return err(format!(
                            "task {}: rho must be symmetric with entries in [-1, 1]",
                            spec.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for GenConfig {
    /// Desk-scale default: one dominant scenario, one mid-size, three small,
    /// five tasks with correlation structure that differs by task. The
    /// strongly correlated pairs sit among scenarios 0-2; the rare-event
    /// task can only support weak targets (Poisson dilution caps what is
    /// reachable, see [`corr::compensate`]).
    fn default() -> GenConfig {
        let full = |v: f64, s: usize| {
            let mut m = vec![vec![v; s]; s];
            for (i, row) in m.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            m
        };
        let with = |mut m: Vec<Vec<f64>>, pairs: &[(usize, usize, f64)]| {
            for &(i, j, v) in pairs {
                m[i][j] = v;
                m[j][i] = v;
            }
            m
        };
        let s = 5;
        let traffic = vec![1.0, 0.7, 0.45, 0.4, 0.55];
        let steady = vec![1.0, 0.95, 0.9, 0.9, 0.92];
        GenConfig {
            scenario_counts: vec![100_000, 30_000, 2_000, 2_000, 3_000],
            tasks: vec![
                TaskSpec {
                    name: "pv".into(),
                    base_mean: 300.0,
                    cv: 0.3,
                    rho: full(0.60, s),
                    mean_scale: traffic.clone(),
                },
                TaskSpec {
                    name: "click".into(),
                    base_mean: 60.0,
                    cv: 0.3,
                    rho: with(full(0.45, s), &[(0, 1, 0.61), (0, 2, 0.53)]),
                    mean_scale: traffic.clone(),
                },
                TaskSpec {
                    name: "expenditure".into(),
                    base_mean: 200.0,
                    cv: 0.3,
                    rho: with(full(0.50, s), &[(0, 1, 0.67), (0, 2, 0.57), (1, 2, 0.70)]),
                    mean_scale: traffic.clone(),
                },
                TaskSpec {
                    name: "gmv".into(),
                    base_mean: 150.0,
                    cv: 0.3,
                    rho: full(0.55, s),
                    mean_scale: traffic,
                },
                TaskSpec {
                    name: "active".into(),
                    base_mean: 3.2,
                    cv: 0.3,
                    rho: full(0.10, s),
                    mean_scale: steady,
                },
            ],
            seq_len: 40,
            horizon: 7,
            n_days: 100,
            latent_dim: 5,
            behavior_base: vec![30.0, 10.0, 5.0],
            performance_base: vec![200.0, 60.0, 20.0],
            obs_scale: vec![1.0, 0.6, 0.35, 0.3, 0.45],
            noise: 0.2,
            trend_weight: 0.25,
            private_frac: 0.3,
            obs_cv: 0.25,
            trend_obs: 0.25,
            season_amp: 0.08,
            day_noise: 0.05,
            rate_floor_frac: 0.05,
            corr_probes: 20_000,
            seed: 7,
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

/// Empirical cross-scenario label correlations measured on probe advertisers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskRho {
    pub task: String,
    pub probes: usize,
    pub rho: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub config: GenConfig,
    pub empirical_rho: Vec<TaskRho>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

/// splitmix64 finalizer; decorrelates derived seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    mix64(mix64(seed ^ tag).wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

const TAG_GEOMETRY: u64 = 0x47454F4D;
const TAG_ADVERTISER: u64 = 0x41445645;
const TAG_PROBE: u64 = 0x50524F42;

fn poisson_draw<R: Rng>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let d = Poisson::new(rate).expect("positive finite rate");
    d.sample(rng) as u64
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Per-task latent structure after compensation.
struct TaskLatent {
    /// Cholesky rows of the compensated correlation matrix; row s mixes the
    /// shared factors into scenario s's label signal.
    rows: Vec<Vec<f64>>,
}

/// Channel loading vectors for one scenario.
struct ScenarioGeometry {
    /// Level loadings, one unit vector per channel.
    level: Vec<Vec<f64>>,
    /// Trend loadings, one unit vector per channel.
    trend: Vec<Vec<f64>>,
}

struct Generator<'c> {
    cfg: &'c GenConfig,
    latents: Vec<TaskLatent>,
    geometry: Vec<ScenarioGeometry>,
}

impl<'c> Generator<'c> {
    fn new(cfg: &'c GenConfig) -> Result<Generator<'c>, DataError> {
        cfg.validate()?;
        let s = cfg.n_scenarios();

        let mut latents = Vec::with_capacity(cfg.tasks.len());
        for task in &cfg.tasks {
            let att: Vec<f64> = (0..s)
                .map(|i| corr::attenuation(task.base_mean * task.mean_scale[i], task.cv))
                .collect();
            let mut latent = vec![vec![0.0; s]; s];
            for (i, row) in latent.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            for i in 0..s {
                for j in 0..i {
                    let v = corr::compensate(task.rho[i][j], cfg.noise, att[i], att[j])?;
                    latent[i][j] = v;
                    latent[j][i] = v;
                }
            }
            let rows = corr::cholesky_psd(&latent)?;
            latents.push(TaskLatent { rows });
        }

        // Observation geometry is scenario structure, not advertiser noise:
        // fixed for the dataset, derived from the seed alone.
        let mut geo_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_GEOMETRY, 0));
        let (l, c) = (cfg.latent_dim, cfg.n_channels());
        let phi = cfg.private_frac;
        let mut geometry = Vec::with_capacity(s);
        for _ in 0..s {
            let mut level = Vec::with_capacity(c);
            let mut trend = Vec::with_capacity(c);
            for j in 0..c {
                level.push(loading(l, j % l, phi, &mut geo_rng));
                trend.push(loading(l, (j + 1) % l, phi, &mut geo_rng));
            }
            geometry.push(ScenarioGeometry { level, trend });
        }
        Ok(Generator {
            cfg,
            latents,
            geometry,
        })
    }

    /// Label signal x for (advertiser latent, scenario, task): unit variance,
    /// correlated across scenarios per the compensated matrix.
    fn label_signal<R: Rng>(
        &self,
        z_lvl: &[f64],
        z_tr: &[f64],
        scenario: usize,
        task: usize,
        rng: &mut R,
    ) -> f64 {
        let cfg = self.cfg;
        let row = &self.latents[task].rows[scenario];
        let u_lvl = dot(row, &z_lvl[..row.len()]);
        let u_tr = dot(row, &z_tr[..row.len()]);
        let u = (1.0 - cfg.trend_weight).sqrt() * u_lvl + cfg.trend_weight.sqrt() * u_tr;
        let xi: f64 = rng.sample(StandardNormal);
        (1.0 - cfg.noise * cfg.noise).sqrt() * u + cfg.noise * xi
    }

    fn horizon_rate(&self, x: f64, scenario: usize, task: usize) -> f64 {
        let spec = &self.cfg.tasks[task];
        let mu = spec.base_mean * spec.mean_scale[scenario];
        mu * (1.0 + spec.cv * x).max(self.cfg.rate_floor_frac)
    }

    fn emit_sample<R: Rng>(
        &self,
        advertiser_id: u64,
        scenario: usize,
        rng: &mut R,
    ) -> Sample {
        let cfg = self.cfg;
        let (l, t) = (cfg.latent_dim, cfg.seq_len);
        let z_lvl = normal_vec(l, rng);
        let z_tr = normal_vec(l, rng);
        let d0 = rng.gen_range(cfg.seq_len - 1..=cfg.n_days - 1 - cfg.horizon) as u32;

        let mut labels = Vec::with_capacity(cfg.tasks.len());
        let mut true_rates = Vec::with_capacity(cfg.tasks.len());
        for task in 0..cfg.tasks.len() {
            let x = self.label_signal(&z_lvl, &z_tr, scenario, task, rng);
            let rate = self.horizon_rate(x, scenario, task);
            true_rates.push(rate);
            labels.push(poisson_draw(rate, rng));
        }

        let geo = &self.geometry[scenario];
        let n_b = cfg.behavior_base.len();
        let bases: Vec<f64> = cfg
            .behavior_base
            .iter()
            .chain(cfg.performance_base.iter())
            .map(|&b| b * cfg.obs_scale[scenario])
            .collect();
        let mut channels: Vec<Vec<u64>> = Vec::with_capacity(bases.len());
        for (j, &base) in bases.iter().enumerate() {
            let lvl = dot(&geo.level[j], &z_lvl);
            let tr = dot(&geo.trend[j], &z_tr);
            let phase = 2.0 * std::f64::consts::PI * j as f64 / bases.len() as f64;
            let mut days = Vec::with_capacity(t);
            for d in 0..t {
                let ramp = 2.0 * d as f64 / (t - 1) as f64 - 1.0;
                let absday = (d0 as usize + 1 + d - t) as f64;
                let season =
                    cfg.season_amp * (2.0 * std::f64::consts::PI * absday / 7.0 + phase).sin();
                let eps: f64 = rng.sample(StandardNormal);
                let factor = 1.0
                    + cfg.obs_cv * lvl
                    + cfg.trend_obs * tr * ramp
                    + season
                    + cfg.day_noise * eps;
                let rate = base * factor.max(cfg.rate_floor_frac);
                days.push(poisson_draw(rate, rng));
            }
            channels.push(days);
        }
        let behavior_seq: Vec<Vec<u64>> = (0..t)
            .map(|d| (0..n_b).map(|j| channels[j][d]).collect())
            .collect();
        let performance_seq: Vec<Vec<u64>> = (0..t)
            .map(|d| (n_b..bases.len()).map(|j| channels[j][d]).collect())
            .collect();

        // Profile categoricals derive from the latent state so they carry
        // real signal: octile of mean level, quintile of mean trend.
        let scale_stat = z_lvl.iter().sum::<f64>() / (l as f64).sqrt();
        let rating_stat = z_tr.iter().sum::<f64>() / (l as f64).sqrt();
        let octiles = [-1.15, -0.67, -0.32, 0.0, 0.32, 0.67, 1.15];
        let quintiles = [-0.84, -0.25, 0.25, 0.84];
        let business_scale = octiles.iter().filter(|&&q| q <= scale_stat).count() as u32;
        let rating = quintiles.iter().filter(|&&q| q <= rating_stat).count() as u32;
        let category = rng.gen_range(0..16u32);

        let size_bucket = (cfg.scenario_counts[scenario] as f64).log10().floor() as u32;
        let traffic_bucket = (cfg.obs_scale[scenario] * 4.0).ceil().max(1.0) as u32;

        Sample {
            advertiser_id,
            scenario_id: scenario as u32,
            scenario_attrs: vec![scenario as u32, size_bucket, traffic_bucket],
            profile: vec![business_scale, rating, category],
            behavior_seq,
            performance_seq,
            labels,
            day_index: d0,
            true_rates,
        }
    }

    /// Potential labels of probe advertisers in every scenario, and the
    /// Pearson matrix per task they imply. Probes skip sequence generation.
    fn measure_rho(&self) -> Result<Vec<TaskRho>, DataError> {
        let cfg = self.cfg;
        let (s, m, n) = (cfg.n_scenarios(), cfg.tasks.len(), cfg.corr_probes);
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut draws = vec![vec![vec![0.0f64; n]; s]; m];
        for p in 0..n {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_PROBE, p as u64));
            let z_lvl = normal_vec(cfg.latent_dim, &mut rng);
            let z_tr = normal_vec(cfg.latent_dim, &mut rng);
            for task in 0..m {
                for scen in 0..s {
                    let x = self.label_signal(&z_lvl, &z_tr, scen, task, &mut rng);
                    let rate = self.horizon_rate(x, scen, task);
                    draws[task][scen][p] = poisson_draw(rate, &mut rng) as f64;
                }
            }
        }
        let mut out = Vec::with_capacity(m);
        for (task, by_scen) in draws.iter().enumerate() {
            let mut rho = vec![vec![1.0; s]; s];
            for i in 0..s {
                for j in 0..i {
                    let r = corr::pearson(&by_scen[i], &by_scen[j])?;
                    rho[i][j] = r;
                    rho[j][i] = r;
                }
            }
            out.push(TaskRho {
                task: cfg.tasks[task].name.clone(),
                probes: n,
                rho,
            });
        }
        Ok(out)
    }
}

/// Unit loading vector: shared axis blended with a private rotation.
fn loading<R: Rng>(dim: usize, shared_axis: usize, phi: f64, rng: &mut R) -> Vec<f64> {
    let mut r = normal_vec(dim, rng);
    let norm = dot(&r, &r).sqrt().max(1e-12);
    let mut v: Vec<f64> = r
        .iter_mut()
        .enumerate()
        .map(|(k, ri)| {
            let shared = if k == shared_axis { 1.0 } else { 0.0 };
            (1.0 - phi) * shared + phi * (*ri / norm)
        })
        .collect();
    let vnorm = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= vnorm);
    v
}

/// Generates the full panel. Deterministic for a given config.
pub fn generate(cfg: &GenConfig) -> Result<Dataset, DataError> {
    let gen = Generator::new(cfg)?;
    let empirical_rho = gen.measure_rho()?;

    let total: usize = cfg.scenario_counts.iter().sum();
    let mut samples = Vec::with_capacity(total);
    let mut advertiser_id = 0u64;
    for (scenario, &count) in cfg.scenario_counts.iter().enumerate() {
        for _ in 0..count {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_ADVERTISER, advertiser_id));
            samples.push(gen.emit_sample(advertiser_id, scenario, &mut rng));
            advertiser_id += 1;
        }
    }
    Ok(Dataset {
        samples,
        meta: DatasetMeta {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            empirical_rho,
        },
    })
}
