//! Experiment configuration.
//!
//! One `key = value` per line, dotted section prefixes (`market.alpha = 5`),
//! `#` starts a comment. Lists are comma separated. Every key is optional
//! except `seed`; unknown keys are rejected so typos do not silently fall back
//! to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use tristack_core::training::{Aggregation, QualityProbe, TrainerConfig, TrainerKind};
use tristack_core::MarketParams;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn global(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

const KNOWN_KEYS: &[&str] = &[
    "scenario",
    "seed",
    "strategy",
    "market.owners",
    "market.centers",
    "market.lambda",
    "market.rho",
    "market.epsilon",
    "market.alpha",
    "market.xi",
    "owners.quality",
    "owners.capacity",
    "centers.sigma",
    "centers.capacity",
    "train.rounds",
    "train.epochs",
    "train.learning_rate",
    "train.adjust_round",
    "train.adjust",
    "train.aggregation",
    "train.trainer",
    "train.probe",
    "train.samples_per_unit",
    "data.dims",
    "data.classes",
    "data.pool",
    "data.validation",
    "data.noise",
    "sweep.lo",
    "sweep.hi",
    "sweep.steps",
    "sweep.owner",
    "deviation.owners",
    "deviation.lo",
    "deviation.hi",
    "deviation.steps",
    "compare.sizes",
    "compare.runs",
    "compare.fixed_eta",
    "compare.random_lo",
    "compare.random_hi",
    "ablate.pairs",
    "ablate.misreport_fraction",
    "ablate.misreport_ratio",
    "match.sigma",
    "match.undertaking",
    "match.quantity",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Split the text into key/value entries.
fn parse_entries(text: &str) -> Result<BTreeMap<String, Entry>, ConfigError> {
    let mut out: BTreeMap<String, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::at(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::at(line, format!("unknown key `{key}`")));
        }
        if value.is_empty() {
            return Err(ConfigError::at(line, format!("`{key}` has no value")));
        }
        if let Some(prev) = out.get(key) {
            return Err(ConfigError::at(
                line,
                format!("`{key}` already set on line {}", prev.line),
            ));
        }
        out.insert(key.to_string(), Entry { value: value.to_string(), line });
    }
    Ok(out)
}

struct Fields(BTreeMap<String, Entry>);

impl Fields {
    fn line(&self, key: &str) -> Option<usize> {
        self.0.get(key).map(|e| e.line)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                ConfigError::at(e.line, format!("`{key}`: cannot parse `{}`", e.value))
            }),
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(e) = self.0.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    ConfigError::at(e.line, format!("`{key}`: cannot parse list item `{}`", s.trim()))
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|e| e.value.as_str())
    }

    fn fail(&self, key: &str, message: impl Into<String>) -> ConfigError {
        match self.line(key) {
            Some(l) => ConfigError::at(l, message),
            None => ConfigError::global(message),
        }
    }
}

/// How per-party values are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Fixed(Vec<f64>),
    /// Independent uniform draws on `(0, 1]`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    QdRdfl,
    FixedEta(f64),
    RandomEta { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// `sqrt(1 − t)` for true quality `t`, which makes `1 − MSE ≈ t`.
    FromQuality,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub dims: usize,
    pub classes: usize,
    /// Samples held by each owner before any transfer.
    pub pool: usize,
    pub validation: usize,
    pub noise: Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub steps: usize,
    /// 0-based owner index for owner sweeps.
    pub owner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSpec {
    /// 0-based owner indices.
    pub owners: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub sizes: Vec<usize>,
    pub runs: usize,
    /// Defaults to `α/2`.
    pub fixed_eta: Option<f64>,
    pub random_lo: f64,
    /// Defaults to `2α`.
    pub random_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub pairs: usize,
    pub misreport_fraction: f64,
    pub misreport_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSpec {
    pub sigma: Option<Vec<f64>>,
    pub undertaking: Option<Vec<f64>>,
    pub quantity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    /// SHA-256 of the text this config was parsed from.
    pub source_hash: String,
    pub seed: u64,
    pub owners: usize,
    pub centers: usize,
    pub params: MarketParams,
    pub quality: Draw,
    pub owner_capacity: f64,
    pub sigma: Draw,
    pub center_capacity: f64,
    pub strategy: Strategy,
    pub trainer: TrainerConfig,
    pub data: DataSpec,
    pub sweep: SweepSpec,
    pub deviation: DeviationSpec,
    pub compare: CompareSpec,
    pub ablation: AblationSpec,
    pub matching: MatchSpec,
}

fn parse_draw(fields: &Fields, key: &str) -> Result<Draw, ConfigError> {
    match fields.text(key) {
        None | Some("uniform") => Ok(Draw::Uniform),
        Some(_) => Ok(Draw::Fixed(fields.list(key)?.expect("present"))),
    }
}

fn parse_strategy(fields: &Fields) -> Result<Strategy, ConfigError> {
    let Some(text) = fields.text("strategy") else {
        return Ok(Strategy::QdRdfl);
    };
    let bad = || fields.fail("strategy", format!("unknown strategy `{text}` (qd-rdfl, fixed-eta:<v>, random-eta:<lo>,<hi>)"));
    if text == "qd-rdfl" {
        return Ok(Strategy::QdRdfl);
    }
    if let Some(v) = text.strip_prefix("fixed-eta:") {
        return v.trim().parse().map(Strategy::FixedEta).map_err(|_| bad());
    }
    if let Some(range) = text.strip_prefix("random-eta:") {
        let (lo, hi) = range.split_once(',').ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        return Ok(Strategy::RandomEta { lo, hi });
    }
    Err(bad())
}

fn parse_choice<T: Copy>(fields: &Fields, key: &str, options: &[(&str, T)], default: T) -> Result<T, ConfigError> {
    let Some(text) = fields.text(key) else {
        return Ok(default);
    };
    options
        .iter()
        .find(|(name, _)| *name == text)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            fields.fail(key, format!("`{key}` must be one of {}", names.join(", ")))
        })
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let f = Fields(parse_entries(text)?);
        let seed = f
            .parse("seed")?
            .ok_or_else(|| ConfigError::global("`seed` is required"))?;
        let defaults = MarketParams::default();
        let params = MarketParams {
            lambda: f.get("market.lambda", defaults.lambda)?,
            rho: f.get("market.rho", defaults.rho)?,
            epsilon: f.get("market.epsilon", defaults.epsilon)?,
            alpha: f.get("market.alpha", defaults.alpha)?,
            xi: f.get("market.xi", defaults.xi)?,
            quality_fn: defaults.quality_fn,
        };
        let quality = parse_draw(&f, "owners.quality")?;
        let sigma = parse_draw(&f, "centers.sigma")?;
        let owners = match (&quality, f.parse::<usize>("market.owners")?) {
            (_, Some(n)) => n,
            (Draw::Fixed(v), None) => v.len(),
            (Draw::Uniform, None) => 10,
        };
        let centers = match (&sigma, f.parse::<usize>("market.centers")?) {
            (_, Some(m)) => m,
            (Draw::Fixed(v), None) => v.len(),
            (Draw::Uniform, None) => owners,
        };

        let td = TrainerConfig::default();
        let trainer = TrainerConfig {
            rounds: f.get("train.rounds", td.rounds)?,
            local_epochs: f.get("train.epochs", td.local_epochs)?,
            learning_rate: f.get("train.learning_rate", td.learning_rate)?,
            adjust_round: f.get("train.adjust_round", td.adjust_round)?,
            dynamic_adjustment: f.get("train.adjust", td.dynamic_adjustment)?,
            aggregation: parse_choice(
                &f,
                "train.aggregation",
                &[("mean", Aggregation::Mean), ("weighted", Aggregation::Weighted)],
                td.aggregation,
            )?,
            kind: parse_choice(
                &f,
                "train.trainer",
                &[("gradient", TrainerKind::Gradient), ("analytic", TrainerKind::Analytic)],
                td.kind,
            )?,
            probe: parse_choice(
                &f,
                "train.probe",
                &[("validation", QualityProbe::Validation), ("local", QualityProbe::Local)],
                td.probe,
            )?,
            samples_per_unit: f.get("train.samples_per_unit", td.samples_per_unit)?,
            ..td
        };

        let noise = match f.text("data.noise") {
            None | Some("auto") => Noise::FromQuality,
            Some(_) => Noise::Fixed(f.list("data.noise")?.expect("present")),
        };
        let data = DataSpec {
            dims: f.get("data.dims", 5)?,
            classes: f.get("data.classes", 3)?,
            pool: f.get("data.pool", 2000)?,
            validation: f.get("data.validation", 300)?,
            noise,
        };

        let sweep = SweepSpec {
            lo: f.parse("sweep.lo")?,
            hi: f.parse("sweep.hi")?,
            steps: f.get("sweep.steps", 101)?,
            owner: f.get::<usize>("sweep.owner", 1)?.wrapping_sub(1),
        };
        let deviation = DeviationSpec {
            owners: f
                .list::<usize>("deviation.owners")?
                .unwrap_or_else(|| vec![1])
                .into_iter()
                .map(|n| n.wrapping_sub(1))
                .collect(),
            lo: f.get("deviation.lo", -0.6)?,
            hi: f.get("deviation.hi", 0.6)?,
            steps: f.get("deviation.steps", 13)?,
        };
        let compare = CompareSpec {
            sizes: f.list("compare.sizes")?.unwrap_or_else(|| vec![4, 8, 12, 16, 20]),
            runs: f.get("compare.runs", 100)?,
            fixed_eta: f.parse("compare.fixed_eta")?,
            random_lo: f.get("compare.random_lo", 0.0)?,
            random_hi: f.parse("compare.random_hi")?,
        };
        let ablation = AblationSpec {
            pairs: f.get("ablate.pairs", 20)?,
            misreport_fraction: f.get("ablate.misreport_fraction", 0.2)?,
            misreport_ratio: f.get("ablate.misreport_ratio", 0.6)?,
        };
        let matching = MatchSpec {
            sigma: f.list("match.sigma")?,
            undertaking: f.list("match.undertaking")?,
            quantity: f.list("match.quantity")?,
        };

        let cfg = ExperimentConfig {
            scenario: f.text("scenario").unwrap_or("unnamed").to_string(),
            source_hash: crate::output::config_hash(text),
            seed,
            owners,
            centers,
            params,
            quality,
            owner_capacity: f.get("owners.capacity", 1e6)?,
            sigma,
            center_capacity: f.get("centers.capacity", 1e6)?,
            strategy: parse_strategy(&f)?,
            trainer,
            data,
            sweep,
            deviation,
            compare,
            ablation,
            matching,
        };
        cfg.validate_with(&f)?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        text.parse()
    }

    fn validate_with(&self, f: &Fields) -> Result<(), ConfigError> {
        let fail = |key: &str, msg: String| Err(f.fail(key, msg));
        if self.owners < 2 {
            return fail("market.owners", format!("need at least 2 data owners, got {}", self.owners));
        }
        if self.centers < self.owners {
            return fail(
                "market.centers",
                format!("need at least as many centers as owners ({} < {})", self.centers, self.owners),
            );
        }
        if let Err(e) = self.params.validate() {
            let key = ["market.lambda", "market.rho", "market.epsilon", "market.alpha", "market.xi"]
                .into_iter()
                .find(|k| f.line(k).is_some())
                .unwrap_or("market.alpha");
            return fail(key, e.to_string());
        }
        if let Draw::Fixed(v) = &self.quality {
            if v.len() != self.owners {
                return fail("owners.quality", format!("{} qualities for {} owners", v.len(), self.owners));
            }
            if let Some(q) = v.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
                return fail("owners.quality", format!("quality {q} outside (0, 1]"));
            }
        }
        if let Draw::Fixed(v) = &self.sigma {
            if v.len() != self.centers {
                return fail("centers.sigma", format!("{} sigmas for {} centers", v.len(), self.centers));
            }
            if let Some(s) = v.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return fail("centers.sigma", format!("sigma {s} must be positive"));
            }
        }
        if !(self.owner_capacity > 0.0) {
            return fail("owners.capacity", "capacity must be positive".into());
        }
        if !(self.center_capacity > 0.0) {
            return fail("centers.capacity", "capacity must be positive".into());
        }
        match self.strategy {
            Strategy::FixedEta(v) if !(v >= 0.0 && v.is_finite()) => {
                return fail("strategy", format!("fixed payment {v} must be >= 0"));
            }
            Strategy::RandomEta { lo, hi } if !(lo >= 0.0 && hi > lo) => {
                return fail("strategy", format!("random payment range [{lo}, {hi}] is empty or negative"));
            }
            _ => {}
        }
        if let Err(e) = self.trainer.validate() {
            let key = ["train.adjust_round", "train.rounds", "train.epochs", "train.learning_rate", "train.samples_per_unit"]
                .into_iter()
                .find(|k| f.line(k).is_some())
                .unwrap_or("train.rounds");
            return fail(key, e.to_string());
        }
        if self.data.dims < 1 || self.data.classes < 2 || self.data.pool < 1 || self.data.validation < 1 {
            return fail("data.dims", "data needs dims >= 1, classes >= 2, pool >= 1, validation >= 1".into());
        }
        if let Noise::Fixed(v) = &self.data.noise {
            if v.len() != self.owners || v.iter().any(|s| !(*s >= 0.0)) {
                return fail("data.noise", format!("need {} non-negative noise levels", self.owners));
            }
        }
        if self.sweep.steps < 3 {
            return fail("sweep.steps", "a sweep needs at least 3 points".into());
        }
        if self.sweep.owner >= self.owners {
            return fail("sweep.owner", format!("owner index must be in 1..={}", self.owners));
        }
        if let (Some(lo), Some(hi)) = (self.sweep.lo, self.sweep.hi) {
            if !(hi > lo && lo >= 0.0) {
                return fail("sweep.hi", format!("sweep range [{lo}, {hi}] is empty or negative"));
            }
        }
        if self.deviation.owners.iter().any(|&n| n >= self.owners) || self.deviation.owners.is_empty() {
            return fail("deviation.owners", format!("owner indices must be in 1..={}", self.owners));
        }
        if !(self.deviation.lo > -1.0 && self.deviation.hi > self.deviation.lo) || self.deviation.steps < 2 {
            return fail("deviation.lo", "deviation range must satisfy -1 < lo < hi with >= 2 steps".into());
        }
        if self.compare.sizes.iter().any(|&n| n < 2) || self.compare.sizes.is_empty() || self.compare.runs < 1 {
            return fail("compare.sizes", "compare needs sizes >= 2 and at least one run".into());
        }
        if !(self.ablation.misreport_fraction >= 0.0 && self.ablation.misreport_fraction <= 1.0)
            || !(self.ablation.misreport_ratio > -1.0)
            || self.ablation.pairs < 1
        {
            return fail("ablate.misreport_fraction", "misreport fraction must be in [0, 1], ratio > -1, pairs >= 1".into());
        }
        let m = &self.matching;
        if let (Some(s), Some(d)) = (&m.sigma, &m.undertaking) {
            if s.len() != d.len() {
                return fail("match.undertaking", format!("{} sigmas but {} undertakings", s.len(), d.len()));
            }
        }
        if m.sigma.is_some() != m.undertaking.is_some() || m.sigma.is_some() != m.quantity.is_some() {
            return fail("match.sigma", "match.sigma, match.undertaking and match.quantity go together".into());
        }
        Ok(())
    }

    /// Payment of the fixed-η baseline.
    pub fn fixed_eta(&self) -> f64 {
        self.compare.fixed_eta.unwrap_or(self.params.alpha / 2.0)
    }

    /// Range of the random-η baseline.
    pub fn random_range(&self) -> (f64, f64) {
        (
            self.compare.random_lo,
            self.compare.random_hi.unwrap_or(2.0 * self.params.alpha),
        )
    }
}
