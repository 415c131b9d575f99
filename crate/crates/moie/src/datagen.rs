//! Synthetic concept-bottleneck datasets with planted logical rules,
//! class imbalance and parameterized domain shift, plus CSV ingestion.
//!
//! Inputs are generated FROM concepts (concepts -> noisy linear embedding),
//! so the concept-recovery difficulty is controlled by the noise rate.
//! Group ids play the role of patient ids for leakage-free splits.

use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::logic::DnfFormula;
use crate::seed::Rng;

const ROWS_PER_GROUP: usize = 4;
const INPUT_NOISE_STD: f64 = 0.25;
const SUBGROUP_OFFSET_SCALE: f64 = 0.5;
const BACKGROUND_CONCEPT_TILT: f64 = 0.18;
// Scale of the nuisance direction that carries the structured label
// noise; large enough that the input pathway can read it through the
// input noise, while concepts stay blind to it.
const NUISANCE_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Unassigned,
    Train,
    Val,
    Test,
}

/// A dataset of (input, binary concepts, binary label) rows with group ids
/// for leakage-free splitting. Synthetic data additionally carries the
/// latent subgroup index per row and the planted rules that generated it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptTriplet {
    pub x: Tensor,
    pub concepts: Tensor,
    pub y: Vec<u8>,
    pub group_ids: Vec<u64>,
    pub subgroups: Vec<usize>,
    pub split: Vec<SplitTag>,
    pub planted_rules: Vec<DnfFormula>,
}

impl ConceptTriplet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.rows() != n
            || self.concepts.rows() != n
            || self.group_ids.len() != n
            || self.subgroups.len() != n
            || self.split.len() != n
        {
            return Err(Error::Data(format!(
                "row counts disagree: x={}, c={}, y={}, groups={}, subgroups={}, split={}",
                self.x.rows(),
                self.concepts.rows(),
                n,
                self.group_ids.len(),
                self.subgroups.len(),
                self.split.len()
            )));
        }
        for (i, &v) in self.concepts.data.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!(
                    "concept value {v} at flat index {i} is not binary"
                )));
            }
        }
        if self.y.iter().any(|&y| y > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Per-class sample fractions w_m = N_m / N.
    pub fn class_weights(&self) -> Result<[f64; 2]> {
        if self.is_empty() {
            return Err(Error::Data("class weights of an empty dataset".into()));
        }
        let pos = self.y.iter().filter(|&&y| y == 1).count() as f64;
        let n = self.len() as f64;
        Ok([(n - pos) / n, pos / n])
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.y.iter().filter(|&&y| y == 1).count();
        [self.len() - pos, pos]
    }

    pub fn prevalence(&self) -> f64 {
        self.y.iter().filter(|&&y| y == 1).count() as f64 / self.len() as f64
    }

    /// Binary view of one row's concepts.
    pub fn concept_row_bool(&self, i: usize) -> Vec<bool> {
        self.concepts.row(i).iter().map(|&v| v >= 0.5).collect()
    }

    /// Re-run each row's planted subgroup rule on its stored concepts.
    pub fn relabel_via_rules(&self) -> Result<Vec<u8>> {
        if self.planted_rules.is_empty() {
            return Err(Error::Data("dataset carries no planted rules".into()));
        }
        Ok((0..self.len())
            .map(|i| {
                let c = self.concept_row_bool(i);
                u8::from(self.planted_rules[self.subgroups[i]].eval(&c))
            })
            .collect())
    }

    fn select_rows(&self, idx: &[usize], tag: Option<SplitTag>) -> ConceptTriplet {
        let (d, nc) = (self.input_dim(), self.n_concepts());
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut c = Vec::with_capacity(idx.len() * nc);
        let mut y = Vec::with_capacity(idx.len());
        let mut groups = Vec::with_capacity(idx.len());
        let mut subgroups = Vec::with_capacity(idx.len());
        let mut split = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x.row(i));
            c.extend_from_slice(self.concepts.row(i));
            y.push(self.y[i]);
            groups.push(self.group_ids[i]);
            subgroups.push(self.subgroups[i]);
            split.push(tag.unwrap_or(self.split[i]));
        }
        ConceptTriplet {
            x: Tensor::from_rows(idx.len(), d, x).unwrap(),
            concepts: Tensor::from_rows(idx.len(), nc, c).unwrap(),
            y,
            group_ids: groups,
            subgroups,
            split,
            planted_rules: self.planted_rules.clone(),
        }
    }

    /// Rows whose predicate holds; keeps planted metadata.
    pub fn filter<F: Fn(usize) -> bool>(&self, keep: F) -> ConceptTriplet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select_rows(&idx, None)
    }
}

/// Configuration of the synthetic generator. One planted rule per latent
/// subgroup labels that subgroup's rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub input_dim: usize,
    pub n_concepts: usize,
    pub rules: Vec<DnfFormula>,
    pub subgroup_weights: Vec<f64>,
    pub prevalence: f64,
    pub concept_noise: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.input_dim == 0 || self.n_concepts == 0 {
            return Err(Error::Config("n, input_dim and n_concepts must be positive".into()));
        }
        if self.rules.is_empty() || self.rules.len() != self.subgroup_weights.len() {
            return Err(Error::Config(
                "need one planted rule per subgroup weight".into(),
            ));
        }
        let wsum: f64 = self.subgroup_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.subgroup_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config(format!(
                "subgroup weights must be positive and sum to 1, got sum {wsum}"
            )));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!(
                "prevalence must lie in (0,1), got {}",
                self.prevalence
            )));
        }
        for noise in [self.concept_noise, self.label_noise] {
            if !(0.0..0.5).contains(&noise) {
                return Err(Error::Config(format!(
                    "noise rates must lie in [0, 0.5), got {noise}"
                )));
            }
        }
        for rule in &self.rules {
            rule.validate(self.n_concepts)?;
            if rule.is_empty() {
                return Err(Error::Config(
                    "degenerate config: empty rule makes prevalence 0".into(),
                ));
            }
            // Terms must not share concepts; the prevalence calibration
            // relies on term independence.
            let mut seen = std::collections::HashSet::new();
            for term in &rule.terms {
                for lit in &term.0 {
                    if !seen.insert(lit.concept) {
                        return Err(Error::Config(format!(
                            "rule reuses concept {} across terms; terms must be concept-disjoint",
                            lit.concept
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameterized domain shift: affine input transform, optional extra
/// concept noise, optional subgroup reweighting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Row transform: x' = A x + b. `None` leaves inputs untouched.
    pub transform: Option<AffineShift>,
    pub concept_noise_delta: f64,
    pub subgroup_weights: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineShift {
    /// d x d matrix, must be invertible.
    pub a: Tensor,
    pub b: Vec<f64>,
}

impl ShiftConfig {
    pub fn identity(seed: u64) -> Self {
        ShiftConfig {
            transform: None,
            concept_noise_delta: 0.0,
            subgroup_weights: None,
            seed,
        }
    }
}

/// Per-subgroup concept Bernoulli profile calibrated so each subgroup's
/// rule fires with probability `prevalence`. Concepts used by any other
/// subgroup's rule sit at 0.5 (maximally uninformative outside their
/// home subgroup); concepts no rule touches carry a subgroup-dependent
/// tilt so subgroups stay identifiable in concept space.
fn concept_profile(
    rules: &[DnfFormula],
    subgroup: usize,
    n_concepts: usize,
    prevalence: f64,
) -> Vec<f64> {
    let rule = &rules[subgroup];
    let any_rule: std::collections::HashSet<usize> = rules
        .iter()
        .flat_map(|r| r.concepts())
        .collect();
    let mut profile = vec![0.5; n_concepts];
    for (j, p) in profile.iter_mut().enumerate() {
        if !any_rule.contains(&j) {
            let sign = if (j + subgroup) % 2 == 0 { 1.0 } else { -1.0 };
            *p = 0.5 + sign * BACKGROUND_CONCEPT_TILT;
        }
    }
    // With concept-disjoint terms, P(any term fires) factorizes; aim each
    // term at probability q with 1 - (1-q)^T = prevalence, then spread q
    // uniformly over the term's literals.
    let t = rule.terms.len() as f64;
    let q = 1.0 - (1.0 - prevalence).powf(1.0 / t);
    for term in &rule.terms {
        let p_lit = q.powf(1.0 / term.0.len() as f64);
        for lit in &term.0 {
            profile[lit.concept] = if lit.negated { 1.0 - p_lit } else { p_lit };
        }
    }
    profile
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |error| < 1.2e-9); pins the structured-label-noise threshold.
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Draw a synthetic dataset: per row, sample a subgroup, sample concepts
/// from that subgroup's Bernoulli profile, label via the subgroup's rule,
/// apply noise, and embed clean concepts into inputs.
///
/// Label noise is structured: each row carries a latent nuisance value
/// emitted into the inputs along a fixed direction, and rows in that
/// value's upper tail (mass = the configured rate) get flipped labels.
/// The input pathway can learn the flip region; no concept carries it.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<ConceptTriplet> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (n, d, nc) = (cfg.n, cfg.input_dim, cfg.n_concepts);
    let n_sub = cfg.rules.len();

    let profiles: Vec<Vec<f64>> = cfg
        .rules
        .iter()
        .enumerate()
        .map(|(s, _)| concept_profile(&cfg.rules, s, nc, cfg.prevalence))
        .collect();

    // Shared concept embedding plus one offset direction per subgroup and
    // the nuisance direction carrying the label-noise latent.
    let embed: Vec<f64> = (0..d * nc)
        .map(|_| normal.sample(&mut rng) / (nc as f64).sqrt())
        .collect();
    let offsets: Vec<Vec<f64>> = (0..n_sub)
        .map(|_| {
            (0..d)
                .map(|_| normal.sample(&mut rng) * SUBGROUP_OFFSET_SCALE)
                .collect()
        })
        .collect();
    let nuisance: Vec<f64> = (0..d)
        .map(|_| normal.sample(&mut rng) * NUISANCE_SCALE / (d as f64).sqrt())
        .collect();
    let flip_threshold = if cfg.label_noise > 0.0 {
        normal_quantile(1.0 - cfg.label_noise)
    } else {
        f64::INFINITY
    };

    // Groups model patients: a few rows each, one subgroup per group.
    let n_groups = n.div_ceil(ROWS_PER_GROUP);
    let group_subgroup: Vec<usize> = (0..n_groups)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (s, &w) in cfg.subgroup_weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return s;
                }
            }
            n_sub - 1
        })
        .collect();

    let mut x = vec![0.0; n * d];
    let mut c_obs = vec![0.0; n * nc];
    let mut y = Vec::with_capacity(n);
    let mut group_ids = Vec::with_capacity(n);
    let mut subgroups = Vec::with_capacity(n);

    for i in 0..n {
        let gid = i / ROWS_PER_GROUP;
        let s = group_subgroup[gid];
        let profile = &profiles[s];

        let clean: Vec<bool> = (0..nc).map(|j| rng.gen::<f64>() < profile[j]).collect();
        let u: f64 = normal.sample(&mut rng);
        let mut label = u8::from(cfg.rules[s].eval(&clean));
        if u > flip_threshold {
            label ^= 1;
        }
        for j in 0..nc {
            let mut bit = clean[j];
            if cfg.concept_noise > 0.0 && rng.gen::<f64>() < cfg.concept_noise {
                bit = !bit;
            }
            c_obs[i * nc + j] = f64::from(bit);
        }
        let row = &mut x[i * d..(i + 1) * d];
        for (k, r) in row.iter_mut().enumerate() {
            let mut v = offsets[s][k] + u * nuisance[k];
            for (j, &on) in clean.iter().enumerate() {
                if on {
                    v += embed[k * nc + j];
                }
            }
            *r = v + INPUT_NOISE_STD * normal.sample(&mut rng);
        }
        y.push(label);
        group_ids.push(gid as u64);
        subgroups.push(s);
    }

    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::Config(format!(
            "degenerate config: realized prevalence {} with target {}",
            pos as f64 / n as f64,
            cfg.prevalence
        )));
    }

    let data = ConceptTriplet {
        x: Tensor::from_rows(n, d, x)?,
        concepts: Tensor::from_rows(n, nc, c_obs)?,
        y,
        group_ids,
        subgroups,
        split: vec![SplitTag::Unassigned; n],
        planted_rules: cfg.rules.clone(),
    };
    data.validate()?;
    Ok(data)
}

/// Determinant via Gaussian elimination with partial pivoting.
fn determinant(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut m = a.data.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if m[pivot * n + col].abs() < 1e-12 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        det *= m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
        }
    }
    det
}

/// Apply a domain shift. The input marginal moves (x' = A x + b) and
/// subgroups may be reweighted by resampling; concept semantics are
/// preserved: when extra concept noise is injected, labels are re-derived
/// from the flipped concepts via the planted rules, so rule evaluation
/// still reproduces Y exactly.
pub fn apply_domain_shift(data: &ConceptTriplet, shift: &ShiftConfig) -> Result<ConceptTriplet> {
    let mut rng = Rng::seed_from_u64(shift.seed);
    let n = data.len();
    let d = data.input_dim();

    // Subgroup reweighting first: resample row indices per new weights.
    let mut out = if let Some(weights) = &shift.subgroup_weights {
        let n_sub = data.planted_rules.len().max(
            data.subgroups.iter().max().map(|&s| s + 1).unwrap_or(1),
        );
        if weights.len() != n_sub {
            return Err(Error::Config(format!(
                "reweighting expects {n_sub} subgroup weights, got {}",
                weights.len()
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("subgroup reweighting must sum to 1".into()));
        }
        let mut by_sub: Vec<Vec<usize>> = vec![Vec::new(); n_sub];
        for (i, &s) in data.subgroups.iter().enumerate() {
            by_sub[s].push(i);
        }
        let mut picks = Vec::with_capacity(n);
        for (s, w) in weights.iter().enumerate() {
            let count = (w * n as f64).round() as usize;
            if count > 0 && by_sub[s].is_empty() {
                return Err(Error::Config(format!(
                    "subgroup {s} has weight {w} but no source rows"
                )));
            }
            for _ in 0..count {
                picks.push(by_sub[s][rng.gen_range(0..by_sub[s].len())]);
            }
        }
        // Round-off may leave a few rows short.
        while picks.len() < n {
            picks.push(rng.gen_range(0..n));
        }
        picks.truncate(n);
        for i in (1..picks.len()).rev() {
            let j = rng.gen_range(0..=i);
            picks.swap(i, j);
        }
        data.select_rows(&picks, None)
    } else {
        data.clone()
    };

    if let Some(t) = &shift.transform {
        if t.a.rows() != d || t.a.cols() != d || t.b.len() != d {
            return Err(Error::ShapeMismatch {
                node: "domain shift".into(),
                detail: format!("transform must be {d}x{d} plus offset of length {d}"),
            });
        }
        if determinant(&t.a) == 0.0 {
            return Err(Error::Config("shift matrix A is not invertible".into()));
        }
        let mut shifted = vec![0.0; out.x.numel()];
        for i in 0..out.len() {
            let row = out.x.row(i);
            let dst = &mut shifted[i * d..(i + 1) * d];
            for (r, dv) in dst.iter_mut().enumerate() {
                let mut acc = t.b[r];
                let arow = &t.a.data[r * d..(r + 1) * d];
                for (av, &xv) in arow.iter().zip(row) {
                    acc += av * xv;
                }
                *dv = acc;
            }
        }
        out.x = Tensor::from_rows(out.len(), d, shifted)?;
    }

    if shift.concept_noise_delta > 0.0 {
        if !(0.0..0.5).contains(&shift.concept_noise_delta) {
            return Err(Error::Config("concept noise delta must lie in [0, 0.5)".into()));
        }
        if out.planted_rules.is_empty() {
            return Err(Error::Config(
                "concept noise delta requires planted rules to re-derive labels".into(),
            ));
        }
        let nc = out.n_concepts();
        for i in 0..out.len() {
            for j in 0..nc {
                if rng.gen::<f64>() < shift.concept_noise_delta {
                    let v = &mut out.concepts.data[i * nc + j];
                    *v = 1.0 - *v;
                }
            }
        }
        out.y = out.relabel_via_rules()?;
    }

    let pos = out.y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == out.len() {
        return Err(Error::Config(
            "shift produced a single-class dataset".into(),
        ));
    }
    Ok(out)
}

/// Group-disjoint train/val/test split with largest-remainder group
/// apportionment.
pub fn split(
    data: &ConceptTriplet,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(ConceptTriplet, ConceptTriplet, ConceptTriplet)> {
    let fsum: f64 = fractions.iter().sum();
    if (fsum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut groups: Vec<u64> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for &g in &data.group_ids {
            if seen.insert(g) {
                groups.push(g);
            }
        }
    }
    let n_parts = fractions.iter().filter(|&&f| f > 0.0).count();
    if groups.len() < n_parts {
        return Err(Error::Data(format!(
            "cannot split {} group(s) into {n_parts} disjoint parts",
            groups.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    for i in (1..groups.len()).rev() {
        let j = rng.gen_range(0..=i);
        groups.swap(i, j);
    }

    let g = groups.len();
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|f| (f * g as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * g as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..g - assigned {
        counts[remainders[k % 3].0] += 1;
    }

    let mut tag_of = std::collections::HashMap::new();
    let mut cursor = 0usize;
    for (part, &count) in counts.iter().enumerate() {
        let tag = [SplitTag::Train, SplitTag::Val, SplitTag::Test][part];
        for &gid in &groups[cursor..cursor + count] {
            tag_of.insert(gid, tag);
        }
        cursor += count;
    }

    let pick = |tag: SplitTag| -> Vec<usize> {
        (0..data.len())
            .filter(|&i| tag_of.get(&data.group_ids[i]) == Some(&tag))
            .collect()
    };
    let train = data.select_rows(&pick(SplitTag::Train), Some(SplitTag::Train));
    let val = data.select_rows(&pick(SplitTag::Val), Some(SplitTag::Val));
    let test = data.select_rows(&pick(SplitTag::Test), Some(SplitTag::Test));
    Ok((train, val, test))
}

// ── CSV interchange ──────────────────────────────────────────────────
//
// Columns: x_0..x_{d-1}, c_0..c_{n_c-1}, y, group. One row per sample.

pub fn save_csv(data: &ConceptTriplet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header: Vec<String> = (0..data.input_dim()).map(|j| format!("x_{j}")).collect();
    header.extend((0..data.n_concepts()).map(|j| format!("c_{j}")));
    header.push("y".into());
    header.push("group".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.extend(data.concepts.row(i).iter().map(|v| format!("{}", *v as u8)));
        rec.push(data.y[i].to_string());
        rec.push(data.group_ids[i].to_string());
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<ConceptTriplet> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|_| Error::MissingArtifact(format!("csv file {}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let mut x_cols = Vec::new();
    let mut c_cols = Vec::new();
    let mut y_col = None;
    let mut group_col = None;
    for (idx, name) in header.iter().enumerate() {
        if name.starts_with("x_") {
            x_cols.push(idx);
        } else if name.starts_with("c_") {
            c_cols.push(idx);
        } else if name == "y" {
            y_col = Some(idx);
        } else if name == "group" {
            group_col = Some(idx);
        }
    }
    if x_cols.is_empty() || c_cols.is_empty() {
        return Err(Error::Data("csv header lacks x_* or c_* columns".into()));
    }
    let y_col = y_col.ok_or_else(|| Error::Data("csv header lacks a `y` column".into()))?;
    let group_col =
        group_col.ok_or_else(|| Error::Data("csv header lacks a `group` column".into()))?;

    let mut x = Vec::new();
    let mut c = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (row_idx, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            row: row_idx + 1,
            column: "<record>".into(),
            detail: e.to_string(),
        })?;
        let parse_f64 = |col: usize| -> Result<f64> {
            record[col].parse::<f64>().map_err(|e| Error::Csv {
                row: row_idx + 1,
                column: header[col].to_string(),
                detail: e.to_string(),
            })
        };
        for &col in &x_cols {
            x.push(parse_f64(col)?);
        }
        for &col in &c_cols {
            let v = parse_f64(col)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Csv {
                    row: row_idx + 1,
                    column: header[col].to_string(),
                    detail: format!("concept value {v} is not binary"),
                });
            }
            c.push(v);
        }
        let yv = parse_f64(y_col)?;
        if yv != 0.0 && yv != 1.0 {
            return Err(Error::Csv {
                row: row_idx + 1,
                column: "y".into(),
                detail: format!("label {yv} is not binary"),
            });
        }
        y.push(yv as u8);
        groups.push(record[group_col].parse::<u64>().map_err(|e| Error::Csv {
            row: row_idx + 1,
            column: "group".into(),
            detail: e.to_string(),
        })?);
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("csv contains no data rows".into()));
    }
    let data = ConceptTriplet {
        x: Tensor::from_rows(n, x_cols.len(), x)?,
        concepts: Tensor::from_rows(n, c_cols.len(), c)?,
        y,
        group_ids: groups,
        subgroups: vec![0; n],
        split: vec![SplitTag::Unassigned; n],
        planted_rules: Vec::new(),
    };
    data.validate()?;
    Ok(data)
}

/// The two-subgroup benchmark configuration used across examples/tests:
/// subgroup A labeled by c0 ^ c1, subgroup B by (c2 ^ c3) v (c4 ^ !c5).
pub fn benchmark_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n: 10_000,
        input_dim: 32,
        n_concepts: 12,
        rules: vec![
            DnfFormula::from_terms(&[&[(0, false), (1, false)]]),
            DnfFormula::from_terms(&[&[(2, false), (3, false)], &[(4, false), (5, true)]]),
        ],
        subgroup_weights: vec![0.65, 0.35],
        prevalence: 0.2,
        concept_noise: 0.05,
        label_noise: 0.08,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            n: 400,
            input_dim: 8,
            n_concepts: 6,
            rules: vec![DnfFormula::from_terms(&[&[(0, false), (1, false)]])],
            subgroup_weights: vec![1.0],
            prevalence: 0.3,
            concept_noise: 0.0,
            label_noise: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_noise_labels_follow_the_rule_exactly() {
        let data = generate_synthetic(&small_cfg(5)).unwrap();
        for i in 0..data.len() {
            let c = data.concept_row_bool(i);
            assert_eq!(data.y[i] == 1, c[0] && c[1], "row {i}");
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let a = generate_synthetic(&small_cfg(9)).unwrap();
        let b = generate_synthetic(&small_cfg(9)).unwrap();
        assert_eq!(a.x.data, b.x.data);
        assert_eq!(a.concepts.data, b.concepts.data);
        assert_eq!(a.y, b.y);
        assert_eq!(a.group_ids, b.group_ids);
    }

    #[test]
    fn rare_class_prevalence_within_binomial_bounds() {
        let mut cfg = small_cfg(3);
        cfg.n = 10_000;
        cfg.prevalence = 0.03;
        let data = generate_synthetic(&cfg).unwrap();
        let pos = data.y.iter().filter(|&&y| y == 1).count();
        assert!((200..=400).contains(&pos), "positives = {pos}");
        let w = data.class_weights().unwrap();
        assert!((0.02..=0.04).contains(&w[1]), "w1 = {}", w[1]);
    }

    #[test]
    fn class_weights_count_correctly() {
        let mut data = generate_synthetic(&small_cfg(5)).unwrap();
        data.y = vec![0, 0, 0, 1];
        data.group_ids.truncate(4);
        data.subgroups.truncate(4);
        data.split.truncate(4);
        data.x = Tensor::from_rows(4, 8, data.x.data[..32].to_vec()).unwrap();
        data.concepts = Tensor::from_rows(4, 6, data.concepts.data[..24].to_vec()).unwrap();
        assert_eq!(data.class_weights().unwrap(), [0.75, 0.25]);
    }

    #[test]
    fn degenerate_rule_is_rejected() {
        let mut cfg = small_cfg(1);
        cfg.rules = vec![DnfFormula::new(vec![])];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identity_shift_is_a_no_op() {
        let data = generate_synthetic(&small_cfg(2)).unwrap();
        let shifted = apply_domain_shift(&data, &ShiftConfig::identity(77)).unwrap();
        assert_eq!(shifted.x.data, data.x.data);
        assert_eq!(shifted.concepts.data, data.concepts.data);
        assert_eq!(shifted.y, data.y);
    }

    #[test]
    fn doubling_transform_doubles_column_means() {
        let data = generate_synthetic(&small_cfg(2)).unwrap();
        let d = data.input_dim();
        let mut a = Tensor::zeros(d, d);
        for i in 0..d {
            a.data[i * d + i] = 2.0;
        }
        let shift = ShiftConfig {
            transform: Some(AffineShift { a, b: vec![0.0; d] }),
            concept_noise_delta: 0.0,
            subgroup_weights: None,
            seed: 1,
        };
        let shifted = apply_domain_shift(&data, &shift).unwrap();
        for j in 0..d {
            let before: f64 =
                (0..data.len()).map(|i| data.x.at(i, j)).sum::<f64>() / data.len() as f64;
            let after: f64 =
                (0..data.len()).map(|i| shifted.x.at(i, j)).sum::<f64>() / data.len() as f64;
            assert!((after - 2.0 * before).abs() < 1e-9);
        }
    }

    #[test]
    fn relabeling_after_shift_changes_no_labels() {
        let data = generate_synthetic(&small_cfg(4)).unwrap();
        let shift = ShiftConfig {
            transform: None,
            concept_noise_delta: 0.1,
            subgroup_weights: None,
            seed: 13,
        };
        let shifted = apply_domain_shift(&data, &shift).unwrap();
        assert_eq!(shifted.relabel_via_rules().unwrap(), shifted.y);
    }

    #[test]
    fn non_invertible_transform_is_rejected() {
        let data = generate_synthetic(&small_cfg(2)).unwrap();
        let d = data.input_dim();
        let shift = ShiftConfig {
            transform: Some(AffineShift {
                a: Tensor::zeros(d, d),
                b: vec![0.0; d],
            }),
            concept_noise_delta: 0.0,
            subgroup_weights: None,
            seed: 1,
        };
        assert!(apply_domain_shift(&data, &shift).is_err());
    }

    #[test]
    fn split_allocates_groups_80_10_10() {
        let mut cfg = small_cfg(8);
        cfg.n = 40; // exactly 10 groups of 4 rows
        let data = generate_synthetic(&cfg).unwrap();
        let (train, val, test) = split(&data, [0.8, 0.1, 0.1], 21).unwrap();
        let count_groups = |t: &ConceptTriplet| {
            let mut g: Vec<u64> = t.group_ids.clone();
            g.sort_unstable();
            g.dedup();
            g.len()
        };
        assert_eq!(count_groups(&train), 8);
        assert_eq!(count_groups(&val), 1);
        assert_eq!(count_groups(&test), 1);
    }

    #[test]
    fn split_is_group_disjoint_and_seed_stable() {
        let data = generate_synthetic(&small_cfg(8)).unwrap();
        let (tr1, va1, te1) = split(&data, [0.8, 0.1, 0.1], 3).unwrap();
        let (tr2, _, _) = split(&data, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(tr1.group_ids, tr2.group_ids);
        let mut seen = std::collections::HashSet::new();
        for t in [&tr1, &va1, &te1] {
            let mut groups: Vec<u64> = t.group_ids.clone();
            groups.sort_unstable();
            groups.dedup();
            for g in groups {
                assert!(seen.insert(g), "group {g} appears in two splits");
            }
        }
    }

    #[test]
    fn single_group_cannot_be_split() {
        let mut data = generate_synthetic(&small_cfg(8)).unwrap();
        data.group_ids.iter_mut().for_each(|g| *g = 0);
        assert!(split(&data, [0.8, 0.1, 0.1], 3).is_err());
    }

    #[test]
    fn csv_roundtrip_preserves_the_triplet() {
        let data = generate_synthetic(&small_cfg(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        save_csv(&data, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        assert_eq!(loaded.y, data.y);
        assert_eq!(loaded.group_ids, data.group_ids);
        assert_eq!(loaded.concepts.data, data.concepts.data);
        for (a, b) in loaded.x.data.iter().zip(&data.x.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_rejects_non_binary_concept_naming_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x_0,c_0,y,group\n0.5,2,1,0\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1") && msg.contains("c_0"), "{msg}");
    }
}
