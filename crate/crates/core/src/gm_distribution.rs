//! Latent Gaussian-mixture distribution: storage, sampling, empirical
//! estimation and the blend update used by the evolution phase, plus the
//! plain Gaussian EDA it is derived from.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};

/// Smallest variance any class component may take.
pub const VARIANCE_FLOOR: f64 = 1e-8;

const GMM_MAGIC: &[u8] = b"MLGMM01";
const MAX_DIM: u64 = 1 << 24;

/// Natural log of [`VARIANCE_FLOOR`].
pub fn log_variance_floor() -> f64 {
    VARIANCE_FLOOR.ln()
}

/// Per-class means and diagonal log-variances of the latent mixture.
///
/// Row `k` of both matrices describes class `k`. Variances are kept as logs
/// so gradient steps cannot make them negative.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    means: Array2<f64>,
    log_variances: Array2<f64>,
}

impl GmmParams {
    pub fn new(means: Array2<f64>, log_variances: Array2<f64>) -> Result<Self> {
        if means.dim() != log_variances.dim() {
            return Err(Error::Shape(format!(
                "means {:?} vs log-variances {:?}",
                means.dim(),
                log_variances.dim()
            )));
        }
        let (k, h) = means.dim();
        if k == 0 || h == 0 {
            return Err(Error::Shape(format!("empty mixture {k}x{h}")));
        }
        if means.iter().chain(log_variances.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("mixture parameters must be finite".into()));
        }
        let mut params = Self {
            means: means.as_standard_layout().into_owned(),
            log_variances: log_variances.as_standard_layout().into_owned(),
        };
        params.clamp_variances();
        Ok(params)
    }

    pub fn from_variances(means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Input("variances must be positive and finite".into()));
        }
        Self::new(means, variances.mapv(f64::ln))
    }

    /// Zero means, unit variances.
    pub fn standard(class_count: usize, dim: usize) -> Result<Self> {
        Self::new(
            Array2::zeros((class_count, dim)),
            Array2::zeros((class_count, dim)),
        )
    }

    /// Means drawn from `N(0, spread^2)`, unit variances.
    pub fn random<R: Rng + ?Sized>(
        class_count: usize,
        dim: usize,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let means = Array2::from_shape_simple_fn((class_count, dim), || {
            let z: f64 = StandardNormal.sample(&mut *rng);
            spread * z
        });
        Self::new(means, Array2::zeros((class_count, dim)))
    }

    pub fn class_count(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn log_variances(&self) -> &Array2<f64> {
        &self.log_variances
    }

    pub fn variances(&self) -> Array2<f64> {
        self.log_variances.mapv(f64::exp)
    }

    pub fn class_gaussian(&self, class: usize) -> ClassGaussian {
        ClassGaussian {
            mean: self.means.row(class).to_owned(),
            variance: self.log_variances.row(class).mapv(f64::exp),
        }
    }

    pub fn set_class(&mut self, class: usize, gaussian: &ClassGaussian) -> Result<()> {
        if class >= self.class_count() {
            return Err(Error::Input(format!(
                "class {class} out of range for {} classes",
                self.class_count()
            )));
        }
        if gaussian.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "class Gaussian has dim {}, mixture has {}",
                gaussian.dim(),
                self.dim()
            )));
        }
        self.means.row_mut(class).assign(&gaussian.mean);
        self.log_variances
            .row_mut(class)
            .assign(&gaussian.variance.mapv(|v| v.max(VARIANCE_FLOOR).ln()));
        Ok(())
    }

    /// Re-applies the variance floor; call after any in-place update.
    pub fn clamp_variances(&mut self) {
        let floor = log_variance_floor();
        self.log_variances.mapv_inplace(|v| v.max(floor));
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().chain(self.log_variances.iter()).all(|v| v.is_finite())
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.means.as_slice_mut().expect("standard layout"),
            self.log_variances.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Writes `MLGMM01`, K and h as little-endian u64, then means and
    /// log-variances as row-major little-endian f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GMM_MAGIC)?;
        codec::put_u64(w, self.class_count() as u64)?;
        codec::put_u64(w, self.dim() as u64)?;
        codec::put_f64s(w, self.means.iter().copied())?;
        codec::put_f64s(w, self.log_variances.iter().copied())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r, "mixture file");
        r.magic(GMM_MAGIC)?;
        let k = r.len("K", MAX_DIM)?;
        let h = r.len("h", MAX_DIM)?;
        let means = r.f64s(k * h)?;
        let log_vars = r.f64s(k * h)?;
        r.expect_eof()?;
        let shape = (k, h);
        Self::new(
            Array2::from_shape_vec(shape, means).map_err(|e| Error::Persist(e.to_string()))?,
            Array2::from_shape_vec(shape, log_vars).map_err(|e| Error::Persist(e.to_string()))?,
        )
        .map_err(|e| Error::Persist(format!("mixture file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// One diagonal Gaussian component with plain (not log) variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

impl ClassGaussian {
    /// Builds a component, raising variances below [`VARIANCE_FLOOR`] to it.
    pub fn new(mean: Array1<f64>, variance: Array1<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if mean.iter().chain(variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("class Gaussian must be finite".into()));
        }
        Ok(Self {
            mean,
            variance: variance.mapv(|v| v.max(VARIANCE_FLOOR)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Latent vectors tagged with the class they were drawn for.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPopulation {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LatentPopulation {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Sub-population at the given row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Draws `counts[k]` independent vectors from class `k` for every class.
///
/// Rows are grouped by class in ascending label order.
pub fn sample<R: Rng + ?Sized>(
    params: &GmmParams,
    counts: &[usize],
    rng: &mut R,
) -> Result<LatentPopulation> {
    if counts.len() != params.class_count() {
        return Err(Error::Shape(format!(
            "{} counts for {} classes",
            counts.len(),
            params.class_count()
        )));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyPopulation);
    }
    let h = params.dim();
    let std_devs = params.log_variances.mapv(|lv| (0.5 * lv).exp());
    let mut features = Array2::zeros((total, h));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        let mean = params.means.row(class);
        let sd = std_devs.row(class);
        for _ in 0..count {
            let mut out = features.row_mut(row);
            for j in 0..h {
                let z: f64 = StandardNormal.sample(&mut *rng);
                out[j] = mean[j] + sd[j] * z;
            }
            labels.push(class);
            row += 1;
        }
    }
    LatentPopulation::new(features, labels, params.class_count())
}

/// Mean and population variance (divide by count) of the members of `class`.
pub fn estimate_class_gaussian(pop: &LatentPopulation, class: usize) -> Result<ClassGaussian> {
    let members: Vec<usize> = pop
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == class).then_some(i))
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    let n = members.len() as f64;
    let mut mean = Array1::<f64>::zeros(pop.dim());
    for &i in &members {
        mean += &pop.features.row(i);
    }
    mean /= n;
    let mut variance = Array1::<f64>::zeros(pop.dim());
    for &i in &members {
        let diff = &pop.features.row(i) - &mean;
        variance += &(&diff * &diff);
    }
    variance /= n;
    ClassGaussian::new(mean, variance)
}

/// Convex blend of a quality-pool component and a diversity-pool component.
pub fn evolve_update(
    quali: &ClassGaussian,
    diver: &ClassGaussian,
    gamma: f64,
) -> Result<ClassGaussian> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Input(format!("blend weight {gamma} outside [0, 1]")));
    }
    if quali.dim() != diver.dim() {
        return Err(Error::Shape(format!(
            "quality dim {} vs diversity dim {}",
            quali.dim(),
            diver.dim()
        )));
    }
    let blend = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
        ndarray::Zip::from(&a)
            .and(&b)
            .map_collect(|&x, &y| gamma * x + (1.0 - gamma) * y)
    };
    ClassGaussian::new(
        blend(quali.mean.view(), diver.mean.view()),
        blend(quali.variance.view(), diver.variance.view()),
    )
}

/// Settings for the plain Gaussian EDA.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicEdaConfig {
    pub population_size: usize,
    pub max_iterations: usize,
    /// Fraction of the population kept as the superior set.
    pub superior_rate: f64,
    /// Weight of the superior-set statistics in the update.
    pub blend: f64,
    /// Per-dimension `(low, high)` interval for the initial population.
    pub init_bounds: Vec<(f64, f64)>,
}

impl BasicEdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config("population size must be at least 2".into()));
        }
        if !(self.superior_rate > 0.0 && self.superior_rate <= 1.0) {
            return Err(Error::Config(format!(
                "superior rate {} outside (0, 1]",
                self.superior_rate
            )));
        }
        if self.superior_count() < 1 {
            return Err(Error::Config("superior set would be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!("blend {} outside [0, 1]", self.blend)));
        }
        if self.init_bounds.is_empty() {
            return Err(Error::Config("search space needs at least one dimension".into()));
        }
        if self
            .init_bounds
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return Err(Error::Config("initial bounds must be finite with low <= high".into()));
        }
        Ok(())
    }

    /// Size of the superior set: `superior_rate * population_size` rounded
    /// to the nearest integer.
    pub fn superior_count(&self) -> usize {
        (self.superior_rate * self.population_size as f64).round() as usize
    }
}

/// Statistics of one EDA generation.
#[derive(Debug, Clone, PartialEq)]
pub struct EdaGeneration {
    pub mean_fitness: f64,
    /// Best fitness seen so far, including this generation.
    pub best_fitness: f64,
    pub population_mean: Array1<f64>,
    pub population_variance: Array1<f64>,
    /// Sampling model after the update; `None` for the final generation.
    pub model: Option<ClassGaussian>,
}

#[derive(Debug, Clone)]
pub struct EdaOutcome {
    pub best_solution: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<EdaGeneration>,
}

fn column_stats(pop: &Array2<f64>, rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let n = rows.len() as f64;
    let mut mean = Array1::<f64>::zeros(pop.ncols());
    for &i in rows {
        mean += &pop.row(i);
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(pop.ncols());
    for &i in rows {
        let d = &pop.row(i) - &mean;
        var += &(&d * &d);
    }
    var /= n;
    (mean, var)
}

/// Maximizes `fitness` with the basic Gaussian EDA: evaluate, keep the top
/// `superior_rate` share, blend superior and whole-population statistics
/// with weight `blend`, resample.
pub fn run_basic_eda<F, R>(fitness: F, cfg: &BasicEdaConfig, rng: &mut R) -> Result<EdaOutcome>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let n = cfg.population_size;
    let h = cfg.init_bounds.len();
    let keep = cfg.superior_count();

    let mut pop = Array2::<f64>::zeros((n, h));
    for mut row in pop.rows_mut() {
        for (x, &(lo, hi)) in row.iter_mut().zip(&cfg.init_bounds) {
            *x = if lo == hi { lo } else { rng.random_range(lo..hi) };
        }
    }

    let mut best_solution = pop.row(0).to_vec();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.max_iterations + 1);
    let all: Vec<usize> = (0..n).collect();

    for k in 0..=cfg.max_iterations {
        let mut scores = Vec::with_capacity(n);
        for row in pop.rows() {
            let x = row.to_vec();
            let f = fitness(&x);
            if !f.is_finite() {
                return Err(Error::Fitness { value: f, vector: x });
            }
            if f > best_fitness {
                best_fitness = f;
                best_solution = x;
            }
            scores.push(f);
        }
        let mean_fitness = scores.iter().sum::<f64>() / n as f64;

        let mut order = all.clone();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let superior = &order[..keep];

        let (pop_mean, pop_var) = column_stats(&pop, &all);
        if k == cfg.max_iterations {
            history.push(EdaGeneration {
                mean_fitness,
                best_fitness,
                population_mean: pop_mean,
                population_variance: pop_var,
                model: None,
            });
            break;
        }
        let (sup_mean, sup_var) = column_stats(&pop, superior);
        let model = evolve_update(
            &ClassGaussian::new(sup_mean, sup_var)?,
            &ClassGaussian::new(pop_mean.clone(), pop_var.clone())?,
            cfg.blend,
        )?;

        let sd = model.variance.mapv(f64::sqrt);
        for mut row in pop.rows_mut() {
            for j in 0..h {
                let z: f64 = StandardNormal.sample(&mut *rng);
                row[j] = model.mean[j] + sd[j] * z;
            }
        }
        history.push(EdaGeneration {
            mean_fitness,
            best_fitness,
            population_mean: pop_mean,
            population_variance: pop_var,
            model: Some(model),
        });
    }

    Ok(EdaOutcome {
        best_solution,
        best_fitness,
        history,
    })
}
