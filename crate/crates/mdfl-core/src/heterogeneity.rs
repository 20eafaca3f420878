//! Sliced Wasserstein heterogeneity measurement.
//!
//! Each device's windows are summarized into a point cloud (one point per
//! window), and distribution divergence between devices is estimated by the
//! sliced Wasserstein distance: the mean 1-D Wasserstein distance of the
//! clouds projected onto random unit directions. The report decomposes a
//! population's non-IID-ness into a user component (same position, across
//! users) and a device component (same user, across positions).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::Serialize;

use crate::data::{device_key, DeviceDataset, MultiDeviceDataset};
use crate::error::{Error, Result};
use crate::fx;
use crate::rng;

/// Empirical distribution: `n` points in `d` dimensions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCloud {
    points: Vec<f64>,
    n: usize,
    dim: usize,
}

impl EmpiricalCloud {
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("cloud dimension must be >= 1".into()));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Domain(format!(
                "cloud needs a positive multiple of {dim} values, got {}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Ok(Self { points, n, dim })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// How a window becomes one cloud point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSummary {
    /// Mean per channel over the window: a `channels`-dimensional point.
    ChannelMeans,
    /// The raw flattened window: a `channels * window_len`-dimensional point.
    Flatten,
}

/// Summarize a device's windows into a cloud, one point per window.
pub fn cloud_from_device(
    dev: &DeviceDataset,
    channels: usize,
    summary: WindowSummary,
) -> Result<EmpiricalCloud> {
    if dev.windows.is_empty() {
        return Err(Error::Domain(format!(
            "device {} holds no windows",
            device_key(&dev.user_id, &dev.device_id)
        )));
    }
    if channels == 0 {
        return Err(Error::Config("channels must be >= 1".into()));
    }
    match summary {
        WindowSummary::ChannelMeans => {
            let mut points = Vec::with_capacity(dev.windows.len() * channels);
            for w in &dev.windows {
                if w.features.len() % channels != 0 {
                    return Err(Error::Shape(format!(
                        "window length {} not divisible by {channels} channels",
                        w.features.len()
                    )));
                }
                let frames = w.features.len() / channels;
                for c in 0..channels {
                    let mut acc = 0.0;
                    for t in 0..frames {
                        acc += w.features[t * channels + c];
                    }
                    points.push(acc / frames as f64);
                }
            }
            EmpiricalCloud::new(points, channels)
        }
        WindowSummary::Flatten => {
            let dim = dev.windows[0].features.len();
            let mut points = Vec::with_capacity(dev.windows.len() * dim);
            for w in &dev.windows {
                if w.features.len() != dim {
                    return Err(Error::Shape("windows have differing feature lengths".into()));
                }
                points.extend_from_slice(&w.features);
            }
            EmpiricalCloud::new(points, dim)
        }
    }
}

/// W1 distance between two 1-D empirical distributions.
///
/// Equal sample counts: sort both and average the absolute differences of
/// order statistics. Unequal counts: evaluate both empirical quantile
/// functions at `max(n_a, n_b)` evenly spaced quantiles and average the
/// absolute differences.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("wasserstein_1d requires non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    Ok(w1_sorted(&sa, &sb))
}

fn w1_sorted(sa: &[f64], sb: &[f64]) -> f64 {
    if sa.len() == sb.len() {
        let mut acc = 0.0;
        for (x, y) in sa.iter().zip(sb) {
            acc += fx::abs(x - y);
        }
        acc / sa.len() as f64
    } else {
        let q_count = sa.len().max(sb.len());
        let mut acc = 0.0;
        for i in 0..q_count {
            let q = (i as f64 + 0.5) / q_count as f64;
            acc += fx::abs(quantile_sorted(sa, q) - quantile_sorted(sb, q));
        }
        acc / q_count as f64
    }
}

/// Linear-interpolation quantile of sorted data at `q` in [0, 1].
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = fx::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

mod streams {
    pub const PROJECTIONS: u64 = 0x4d44_464c_2001;
}

/// Unit projection directions derived only from `(seed, dim,
/// num_projections)`, so every pairwise comparison in one analysis shares
/// them.
fn projection_directions(dim: usize, num_projections: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng_from(rng::mix(
        seed,
        &[streams::PROJECTIONS, dim as u64, num_projections as u64],
    ));
    (0..num_projections)
        .map(|_| loop {
            let dir: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r)).collect();
            let norm = fx::sqrt(dir.iter().map(|x| x * x).sum());
            if norm > 1e-12 {
                break dir.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project_sorted(cloud: &EmpiricalCloud, dir: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let mut acc = 0.0;
        for (x, d) in p.iter().zip(dir) {
            acc += x * d;
        }
        out.push(acc);
    }
    out.sort_unstable_by(f64::total_cmp);
    out
}

/// Sliced Wasserstein distance: mean of `wasserstein_1d` over random unit
/// directions. Deterministic given the seed; symmetric because both clouds
/// see the same directions.
pub fn sliced_wasserstein(
    a: &EmpiricalCloud,
    b: &EmpiricalCloud,
    num_projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "cloud dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if num_projections == 0 {
        return Err(Error::Config("num_projections must be >= 1".into()));
    }
    let dirs = projection_directions(a.dim(), num_projections, seed);
    let mut acc = 0.0;
    for dir in &dirs {
        let pa = project_sorted(a, dir);
        let pb = project_sorted(b, dir);
        acc += w1_sorted(&pa, &pb);
    }
    Ok(acc / num_projections as f64)
}

/// Mean pairwise SWD over all unordered cloud pairs.
pub fn mean_pairwise_swd(
    clouds: &[EmpiricalCloud],
    num_projections: usize,
    seed: u64,
) -> Result<f64> {
    let matrix = pairwise_swd_matrix(clouds, num_projections, seed)?;
    Ok(mean_of_upper_triangle(&matrix))
}

/// Full pairwise SWD matrix. Projections of each cloud are computed once per
/// direction, so the cost is `O(clouds * projections * n log n)` plus
/// `O(pairs * projections * n)` for the distances.
pub fn pairwise_swd_matrix(
    clouds: &[EmpiricalCloud],
    num_projections: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if clouds.len() < 2 {
        return Err(Error::Domain("need at least 2 clouds for pairwise SWD".into()));
    }
    if num_projections == 0 {
        return Err(Error::Config("num_projections must be >= 1".into()));
    }
    let dim = clouds[0].dim();
    if clouds.iter().any(|c| c.dim() != dim) {
        return Err(Error::Shape("clouds have differing dimensions".into()));
    }
    let dirs = projection_directions(dim, num_projections, seed);
    // projected[c][p] = sorted projection of cloud c onto direction p
    let projected: Vec<Vec<Vec<f64>>> = clouds
        .iter()
        .map(|c| dirs.iter().map(|d| project_sorted(c, d)).collect())
        .collect();
    let k = clouds.len();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let mut acc = 0.0;
            for p in 0..num_projections {
                acc += w1_sorted(&projected[i][p], &projected[j][p]);
            }
            let d = acc / num_projections as f64;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(matrix)
}

fn mean_of_upper_triangle(matrix: &[Vec<f64>]) -> f64 {
    let k = matrix.len();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            acc += matrix[i][j];
            pairs += 1;
        }
    }
    acc / pairs as f64
}

/// One entry of the pairwise table in a heterogeneity report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSwd {
    pub a: String,
    pub b: String,
    pub swd: f64,
}

/// Population heterogeneity decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityReport {
    /// Mean pairwise SWD over all `N * K` device clouds.
    pub combined_swd: f64,
    /// Mean over device positions of the cross-user pairwise SWD at that
    /// position (user heterogeneity with the device fixed).
    pub user_swd: f64,
    /// Mean over users of the cross-device pairwise SWD within the user
    /// (device heterogeneity with the user fixed).
    pub device_swd: f64,
    /// Cross-user mean SWD per device position, in position order.
    pub per_position_user_swd: Vec<f64>,
    /// Cross-device mean SWD per user, keyed by user id.
    pub per_user_device_swd: BTreeMap<String, f64>,
    /// Full pairwise table over all device clouds.
    pub per_pair: Vec<PairSwd>,
}

/// Compute the combined / user / device SWD decomposition of a population.
///
/// Requires at least 2 users with a uniform device count of at least 2;
/// positions are matched by each user's sorted device order.
pub fn heterogeneity_report(
    ds: &MultiDeviceDataset,
    num_projections: usize,
    seed: u64,
) -> Result<HeterogeneityReport> {
    heterogeneity_report_with(ds, num_projections, seed, WindowSummary::ChannelMeans)
}

pub fn heterogeneity_report_with(
    ds: &MultiDeviceDataset,
    num_projections: usize,
    seed: u64,
    summary: WindowSummary,
) -> Result<HeterogeneityReport> {
    if ds.users.len() < 2 {
        return Err(Error::Domain("heterogeneity report needs at least 2 users".into()));
    }
    let k = ds.users[0].devices.len();
    if k < 2 {
        return Err(Error::Domain(
            "heterogeneity report needs at least 2 devices per user".into(),
        ));
    }
    if ds.users.iter().any(|u| u.devices.len() != k) {
        return Err(Error::Domain(
            "heterogeneity report needs a uniform device count across users".into(),
        ));
    }

    let mut clouds = Vec::with_capacity(ds.users.len() * k);
    let mut labels = Vec::with_capacity(ds.users.len() * k);
    for user in &ds.users {
        for dev in &user.devices {
            clouds.push(cloud_from_device(dev, ds.channels, summary)?);
            labels.push(device_key(&dev.user_id, &dev.device_id));
        }
    }
    let matrix = pairwise_swd_matrix(&clouds, num_projections, seed)?;
    let combined = mean_of_upper_triangle(&matrix);

    let n = ds.users.len();
    let cloud_index = |user: usize, position: usize| user * k + position;

    let mut per_position = Vec::with_capacity(k);
    for position in 0..k {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                acc += matrix[cloud_index(a, position)][cloud_index(b, position)];
                pairs += 1;
            }
        }
        per_position.push(acc / pairs as f64);
    }
    let user_swd = per_position.iter().sum::<f64>() / k as f64;

    let mut per_user = BTreeMap::new();
    for (u, user) in ds.users.iter().enumerate() {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in a + 1..k {
                acc += matrix[cloud_index(u, a)][cloud_index(u, b)];
                pairs += 1;
            }
        }
        per_user.insert(user.user_id.clone(), acc / pairs as f64);
    }
    let device_swd = per_user.values().sum::<f64>() / n as f64;

    let mut per_pair = Vec::new();
    for i in 0..clouds.len() {
        for j in i + 1..clouds.len() {
            per_pair.push(PairSwd {
                a: labels[i].clone(),
                b: labels[j].clone(),
                swd: matrix[i][j],
            });
        }
    }

    Ok(HeterogeneityReport {
        combined_swd: combined,
        user_swd,
        device_swd,
        per_position_user_swd: per_position,
        per_user_device_swd: per_user,
        per_pair,
    })
}
