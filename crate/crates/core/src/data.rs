//! Dataset representation, min-max scaling and naive initial imputation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmflowError, Result};

/// Dense row-major n×p matrix of finite values.
///
/// Missing cells carry an arbitrary finite placeholder; missingness itself
/// lives in the paired [`MaskMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_names: Option<Vec<String>>,
    /// Declared image shape (height, width) for grid-structured rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<(usize, usize)>,
}

impl DataMatrix {
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if n < 1 || p < 2 {
            return Err(EmflowError::Shape(format!(
                "data needs n >= 1 and p >= 2, got {n}x{p}"
            )));
        }
        if values.len() != n * p {
            return Err(EmflowError::Shape(format!(
                "expected {} values for {n}x{p}, got {}",
                n * p,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmflowError::InvalidArgument(format!(
                "non-finite value at row {}, column {}",
                k / p,
                k % p
            )));
        }
        Ok(Self {
            n,
            p,
            values,
            feature_names: None,
            grid: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return Err(EmflowError::Shape(format!(
                "row {i} has {} columns, expected {p}",
                rows[i].len()
            )));
        }
        Self::new(n, p, rows.concat())
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p {
            return Err(EmflowError::Shape(format!(
                "{} feature names for {} features",
                names.len(),
                self.p
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.p {
            return Err(EmflowError::Shape(format!(
                "grid {height}x{width} does not cover {} features",
                self.p
            )));
        }
        self.grid = Some((height, width));
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn feature_name(&self, j: usize) -> String {
        self.feature_names
            .as_ref()
            .map_or_else(|| format!("column {j}"), |names| names[j].clone())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(idx.len(), self.p, values)?;
        out.feature_names = self.feature_names.clone();
        out.grid = self.grid;
        Ok(out)
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            n: self.n,
            p: self.p,
            values,
            feature_names: self.feature_names.clone(),
            grid: self.grid,
        }
    }

    fn check_same_shape(&self, mask: &MaskMatrix) -> Result<()> {
        if self.n != mask.n() || self.p != mask.p() {
            return Err(EmflowError::Shape(format!(
                "data is {}x{} but mask is {}x{}",
                self.n,
                self.p,
                mask.n(),
                mask.p()
            )));
        }
        Ok(())
    }
}

/// Binary missingness pattern; `true` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    n: usize,
    p: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(n: usize, p: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * p {
            return Err(EmflowError::Shape(format!(
                "expected {} mask bits for {n}x{p}, got {}",
                n * p,
                bits.len()
            )));
        }
        Ok(Self { n, p, bits })
    }

    pub fn observed(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            bits: vec![false; n * p],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(EmflowError::Shape("ragged mask rows".into()));
        }
        Self::new(n, p, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.p + j]
    }

    pub fn set(&mut self, i: usize, j: usize, missing: bool) {
        self.bits[i * self.p + j] = missing;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.bits.chunks_exact(self.p)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.bits.len() as f64
    }

    pub fn observed_in_column(&self, j: usize) -> usize {
        self.rows().filter(|r| !r[j]).count()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            bits.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            p: self.p,
            bits,
        }
    }
}

fn observed_column(data: &DataMatrix, mask: &MaskMatrix, j: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = (0..data.n())
        .filter(|&i| !mask.is_missing(i, j))
        .map(|i| data.get(i, j))
        .collect();
    if vals.is_empty() {
        return Err(EmflowError::NoObservedEntries {
            feature: j,
            name: data.feature_name(j),
        });
    }
    Ok(vals)
}

/// Per-feature min-max scaler fitted on observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Features with `min == max`; these scale to the constant 0.5.
    pub constant: Vec<bool>,
}

pub fn fit_scaler(data: &DataMatrix, mask: &MaskMatrix) -> Result<FeatureScaler> {
    data.check_same_shape(mask)?;
    let mut min = Vec::with_capacity(data.p());
    let mut max = Vec::with_capacity(data.p());
    for j in 0..data.p() {
        let col = observed_column(data, mask, j)?;
        min.push(col.iter().copied().fold(f64::INFINITY, f64::min));
        max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let constant = min.iter().zip(&max).map(|(a, b)| a == b).collect();
    Ok(FeatureScaler { min, max, constant })
}

impl FeatureScaler {
    pub fn p(&self) -> usize {
        self.min.len()
    }

    fn check(&self, data: &DataMatrix) -> Result<()> {
        if data.p() != self.p() {
            return Err(EmflowError::Shape(format!(
                "scaler has {} features, data has {}",
                self.p(),
                data.p()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, data: &DataMatrix) -> Result<DataMatrix> {
        self.check(data)?;
        let p = self.p();
        let values = data
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let j = k % p;
                if self.constant[j] {
                    0.5
                } else {
                    (x - self.min[j]) / (self.max[j] - self.min[j])
                }
            })
            .collect();
        Ok(data.with_values(values))
    }

    pub fn invert(&self, data: &DataMatrix) -> Result<DataMatrix> {
        self.check(data)?;
        let p = self.p();
        let values = data
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let j = k % p;
                if self.constant[j] {
                    self.min[j]
                } else {
                    self.min[j] + x * (self.max[j] - self.min[j])
                }
            })
            .collect();
        Ok(data.with_values(values))
    }
}

/// Data whose missing cells have been filled; observed cells are never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedDataset {
    values: DataMatrix,
    mask: MaskMatrix,
}

impl ImputedDataset {
    /// Starts from `source` as-is (missing cells keep their placeholders).
    pub fn from_source(source: &DataMatrix, mask: &MaskMatrix) -> Result<Self> {
        source.check_same_shape(mask)?;
        Ok(Self {
            values: source.clone(),
            mask: mask.clone(),
        })
    }

    pub fn values(&self) -> &DataMatrix {
        &self.values
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.values.n()
    }

    pub fn p(&self) -> usize {
        self.values.p()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Writes `candidate` into the missing cells of row `i` only.
    pub fn fill_missing(&mut self, i: usize, candidate: &[f64]) {
        let p = self.p();
        let row = &mut self.values.values[i * p..(i + 1) * p];
        for (j, v) in row.iter_mut().enumerate() {
            if self.mask.bits[i * p + j] {
                *v = candidate[j];
            }
        }
    }

    pub fn set_missing_cell(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.mask.is_missing(i, j));
        let p = self.p();
        self.values.values[i * p + j] = v;
    }

    pub fn into_values(self) -> DataMatrix {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    RandomObserved,
    Median,
    NearestNeighborGrid,
}

impl std::str::FromStr for InitStrategy {
    type Err = EmflowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-observed" => Ok(Self::RandomObserved),
            "median" => Ok(Self::Median),
            "nearest-neighbor-grid" => Ok(Self::NearestNeighborGrid),
            _ => Err(EmflowError::InvalidArgument(format!(
                "unknown initial imputation strategy '{s}'"
            ))),
        }
    }
}

fn median(vals: &[f64]) -> f64 {
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub(crate) fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Fills missing cells naively; values for filling come from the data itself.
pub fn initial_impute(
    data: &DataMatrix,
    mask: &MaskMatrix,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ImputedDataset> {
    initial_impute_with_reference(data, mask, data, mask, strategy, seed)
}

/// Like [`initial_impute`], but draws fill values from the observed entries
/// of a separate reference set (e.g. a training fold).
pub fn initial_impute_with_reference(
    data: &DataMatrix,
    mask: &MaskMatrix,
    reference: &DataMatrix,
    reference_mask: &MaskMatrix,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ImputedDataset> {
    data.check_same_shape(mask)?;
    reference.check_same_shape(reference_mask)?;
    if reference.p() != data.p() {
        return Err(EmflowError::Shape(format!(
            "reference has {} features, data has {}",
            reference.p(),
            data.p()
        )));
    }
    let pools = (0..data.p())
        .map(|j| observed_column(reference, reference_mask, j))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ImputedDataset::from_source(data, mask)?;
    match strategy {
        InitStrategy::Median => {
            let medians: Vec<f64> = pools.iter().map(|c| median(c)).collect();
            for i in 0..data.n() {
                out.fill_missing(i, &medians);
            }
        }
        InitStrategy::RandomObserved => {
            for i in 0..data.n() {
                let mut rng = row_rng(seed, i);
                for j in 0..data.p() {
                    if mask.is_missing(i, j) {
                        let v = pools[j][rng.random_range(0..pools[j].len())];
                        out.set_missing_cell(i, j, v);
                    }
                }
            }
        }
        InitStrategy::NearestNeighborGrid => {
            let (h, w) = data.grid().ok_or_else(|| {
                EmflowError::InvalidArgument(
                    "nearest-neighbor-grid imputation needs a declared grid shape".into(),
                )
            })?;
            for i in 0..data.n() {
                let mut rng = row_rng(seed, i);
                for r in 0..h {
                    for c in 0..w {
                        let j = r * w + c;
                        if !mask.is_missing(i, j) {
                            continue;
                        }
                        // Usable neighbours: observed cells, or missing cells
                        // already filled earlier in raster order.
                        let mut cand = Vec::with_capacity(4);
                        let mut consider = |rr: usize, cc: usize, earlier: bool| {
                            let k = rr * w + cc;
                            if !mask.is_missing(i, k) || earlier {
                                cand.push(out.values.get(i, k));
                            }
                        };
                        if r > 0 {
                            consider(r - 1, c, true);
                        }
                        if c > 0 {
                            consider(r, c - 1, true);
                        }
                        if c + 1 < w {
                            consider(r, c + 1, false);
                        }
                        if r + 1 < h {
                            consider(r + 1, c, false);
                        }
                        let v = if cand.is_empty() {
                            pools[j][rng.random_range(0..pools[j].len())]
                        } else {
                            cand[rng.random_range(0..cand.len())]
                        };
                        out.set_missing_cell(i, j, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-feature mean or median of observed entries, used as naive baselines.
pub fn column_statistic(
    data: &DataMatrix,
    mask: &MaskMatrix,
    use_median: bool,
) -> Result<Vec<f64>> {
    (0..data.p())
        .map(|j| {
            let col = observed_column(data, mask, j)?;
            Ok(if use_median {
                median(&col)
            } else {
                col.iter().sum::<f64>() / col.len() as f64
            })
        })
        .collect()
}

/// Fills every missing cell of feature j with `fill[j]`.
pub fn fill_constant(data: &DataMatrix, mask: &MaskMatrix, fill: &[f64]) -> Result<ImputedDataset> {
    let mut out = ImputedDataset::from_source(data, mask)?;
    for i in 0..data.n() {
        out.fill_missing(i, fill);
    }
    Ok(out)
}
