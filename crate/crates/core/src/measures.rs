//! Finite measures on the circle of directions and on the velocity annulus.
//!
//! A [`DirectionMeasure`] carries an atomic part (exact angles) and a binned
//! part (mass per uniform angular bin). Bin `j` of `n` is centred on
//! `2πj/n` and covers `[2πj/n - π/n, 2πj/n + π/n)`, so the bin set is closed
//! under `θ ↦ θ + π` whenever `n` is even. Integrals of continuous
//! functions against bins use the midpoint rule.
//!
//! Velocity measures use the tensor-product layout `m ⊗ q`: one direction
//! measure per speed node.

use std::f64::consts::TAU;

use thiserror::Error;

/// Atoms closer than this (radians) are merged by weight addition.
pub const ATOM_MERGE_TOL: f64 = 1e-12;

/// Default number of angular bins.
pub const DEFAULT_N_THETA: usize = 32;

/// Tolerance on the total weight of a speed measure.
pub const SPEED_NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("{what} must be finite and nonnegative, got {value}")]
    InvalidWeight { what: &'static str, value: f64 },
    #[error("angle must be finite, got {0}")]
    InvalidAngle(f64),
    #[error("speed nodes must be finite and positive, got {0}")]
    InvalidSpeed(f64),
    #[error("speed measure has no nodes")]
    EmptySpeeds,
    #[error("speed weights sum to {0}, expected 1")]
    SpeedNormalization(f64),
    #[error("angular bin counts differ ({0} vs {1})")]
    BinMismatch(usize, usize),
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Centre of bin `j` out of `n`.
pub fn bin_center(j: usize, n: usize) -> f64 {
    TAU * j as f64 / n as f64
}

/// Index of the bin containing `angle`.
pub fn bin_of(angle: f64, n: usize) -> usize {
    ((wrap_angle(angle) * n as f64 / TAU).round() as usize) % n
}

/// Unit vector for `angle`, with components within 1e-15 of 0 or ±1 snapped.
///
/// Snapping keeps axis-aligned velocities exactly axis-aligned.
pub fn unit_vector(angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [snap(c), snap(s)]
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-15 {
        0.0
    } else if (v.abs() - 1.0).abs() < 1e-15 {
        v.signum()
    } else {
        v
    }
}

/// Circular distance between two angles.
pub fn angular_gap(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

/// A symmetric 2×2 tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn outer(v: [f64; 2]) -> Self {
        Self::new(v[0] * v[0], v[0] * v[1], v[1] * v[1])
    }

    pub fn scaled(self, c: f64) -> Self {
        Self::new(c * self.xx, c * self.xy, c * self.yy)
    }

    pub fn add_scaled(&mut self, other: Sym2, c: f64) {
        self.xx += c * other.xx;
        self.xy += c * other.xy;
        self.yy += c * other.yy;
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let mean = 0.5 * self.trace();
        let r = self.deviation();
        [mean - r, mean + r]
    }

    /// Half the eigenvalue gap, `sqrt(((xx - yy)/2)² + xy²)`.
    pub fn deviation(&self) -> f64 {
        (0.5 * (self.xx - self.yy)).hypot(self.xy)
    }

    /// Angle in `(-π/2, π/2]` of the eigenvector of the largest eigenvalue.
    pub fn principal_angle(&self) -> f64 {
        0.5 * (2.0 * self.xy).atan2(self.xx - self.yy)
    }

    pub fn max_abs_diff(&self, other: &Sym2) -> f64 {
        (self.xx - other.xx)
            .abs()
            .max((self.xy - other.xy).abs())
            .max((self.yy - other.yy).abs())
    }
}

/// A point mass on the circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub angle: f64,
    pub weight: f64,
}

impl Atom {
    pub fn new(angle: f64, weight: f64) -> Self {
        Self { angle, weight }
    }
}

/// Sorts atoms by wrapped angle and merges neighbours within [`ATOM_MERGE_TOL`].
/// Weights may be signed; exact zeros are dropped.
fn merge_atoms(mut atoms: Vec<Atom>) -> Vec<Atom> {
    for a in atoms.iter_mut() {
        a.angle = wrap_angle(a.angle);
    }
    atoms.sort_by(|a, b| a.angle.total_cmp(&b.angle));
    let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
    for a in atoms {
        match out.last_mut() {
            Some(last) if angular_gap(last.angle, a.angle) <= ATOM_MERGE_TOL => {
                last.weight += a.weight
            }
            _ => out.push(a),
        }
    }
    if out.len() > 1 {
        let n = out.len();
        if angular_gap(out[0].angle, out[n - 1].angle) <= ATOM_MERGE_TOL {
            let w = out.pop().map(|a| a.weight).unwrap_or(0.0);
            out[0].weight += w;
        }
    }
    out.retain(|a| a.weight != 0.0);
    out
}

fn check_weight(what: &'static str, value: f64) -> Result<(), MeasureError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(MeasureError::InvalidWeight { what, value })
    }
}

/// Adds two bin vectors, treating an empty vector as zero.
fn add_bins(a: &[f64], b: &[f64], sign: f64) -> Result<Vec<f64>, MeasureError> {
    match (a.len(), b.len()) {
        (_, 0) => Ok(a.to_vec()),
        (0, _) => Ok(b.iter().map(|v| sign * v).collect()),
        (na, nb) if na == nb => Ok(a.iter().zip(b).map(|(x, y)| x + sign * y).collect()),
        (na, nb) => Err(MeasureError::BinMismatch(na, nb)),
    }
}

/// Nonnegative finite measure on the unit circle.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionMeasure {
    atoms: Vec<Atom>,
    bins: Vec<f64>,
}

impl DirectionMeasure {
    /// Builds a measure from atoms and bin masses. Angles are wrapped into
    /// `[0, 2π)` and coincident atoms merged.
    pub fn new(atoms: Vec<Atom>, bins: Vec<f64>) -> Result<Self, MeasureError> {
        for a in &atoms {
            if !a.angle.is_finite() {
                return Err(MeasureError::InvalidAngle(a.angle));
            }
            check_weight("atom weight", a.weight)?;
        }
        for &b in &bins {
            check_weight("bin mass", b)?;
        }
        Ok(Self {
            atoms: merge_atoms(atoms),
            bins,
        })
    }

    pub fn zero(n_theta: usize) -> Self {
        Self {
            atoms: Vec::new(),
            bins: vec![0.0; n_theta],
        }
    }

    /// Uniform probability measure spread over `n_theta` bins.
    pub fn uniform(n_theta: usize) -> Self {
        assert!(n_theta > 0, "uniform measure needs at least one bin");
        Self {
            atoms: Vec::new(),
            bins: vec![1.0 / n_theta as f64; n_theta],
        }
    }

    pub fn from_bins(bins: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(Vec::new(), bins)
    }

    /// Unit point mass at `angle`, with `n_theta` empty bins.
    pub fn dirac(angle: f64, n_theta: usize) -> Self {
        Self::new(vec![Atom::new(angle, 1.0)], vec![0.0; n_theta]).expect("finite angle")
    }

    /// `½(δ_γ + δ_{-γ})` for the direction at `angle`.
    pub fn axial(angle: f64, n_theta: usize) -> Self {
        Self::new(
            vec![
                Atom::new(angle, 0.5),
                Atom::new(angle + std::f64::consts::PI, 0.5),
            ],
            vec![0.0; n_theta],
        )
        .expect("finite angle")
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn n_theta(&self) -> usize {
        self.bins.len()
    }

    pub fn atom_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.atom_mass() + self.bins.iter().sum::<f64>()
    }

    pub fn scaled(&self, c: f64) -> Self {
        assert!(c >= 0.0, "nonnegative measures only scale by c >= 0");
        Self {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom::new(a.angle, c * a.weight))
                .filter(|a| a.weight != 0.0)
                .collect(),
            bins: self.bins.iter().map(|b| c * b).collect(),
        }
    }

    /// Rescales to unit mass. The zero measure is returned unchanged.
    pub fn normalized(&self) -> Self {
        let m = self.total_mass();
        if m > 0.0 {
            self.scaled(1.0 / m)
        } else {
            self.clone()
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, MeasureError> {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Ok(Self {
            atoms: merge_atoms(atoms),
            bins: add_bins(&self.bins, &other.bins, 1.0)?,
        })
    }

    /// Image under `θ ↦ θ + π`.
    pub fn flipped(&self) -> Self {
        let n = self.bins.len();
        let bins = if n.is_multiple_of(2) {
            (0..n).map(|j| self.bins[(j + n / 2) % n]).collect()
        } else {
            // Odd bin counts are not closed under the flip; reflect through the
            // nearest bin, which is the best the representation allows.
            (0..n)
                .map(|j| self.bins[bin_of(bin_center(j, n) + std::f64::consts::PI, n)])
                .collect()
        };
        Self::new(
            self.atoms
                .iter()
                .map(|a| Atom::new(a.angle + std::f64::consts::PI, a.weight))
                .collect(),
            bins,
        )
        .expect("flip preserves validity")
    }

    /// True when the measure is invariant under `θ ↦ θ + π` within `tol`
    /// in total variation.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.bins.len().is_multiple_of(2) && self.tv_distance(&self.flipped()) <= tol
    }

    /// `∫ f(θ) dq(θ)`: exact over atoms, midpoint rule over bins.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let n = self.bins.len();
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * f(a.angle)).sum();
        let bins: f64 = self
            .bins
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, b)| b * f(bin_center(j, n)))
            .sum();
        atoms + bins
    }

    /// Like [`integrate`](Self::integrate) with the integrand given on unit vectors.
    pub fn integrate_dir(&self, f: impl Fn([f64; 2]) -> f64) -> f64 {
        self.integrate(|a| f(unit_vector(a)))
    }

    /// `∫ θ dq(θ)`.
    pub fn first_moment(&self) -> [f64; 2] {
        [
            self.integrate_dir(|d| d[0]),
            self.integrate_dir(|d| d[1]),
        ]
    }

    /// `∫ θ ⊗ θ dq(θ)`, the variance-covariance tensor `𝕍(q)`.
    pub fn second_moment(&self) -> Sym2 {
        Sym2::new(
            self.integrate_dir(|d| d[0] * d[0]),
            self.integrate_dir(|d| d[0] * d[1]),
            self.integrate_dir(|d| d[1] * d[1]),
        )
    }

    /// Nematic alignment strength: largest eigenvalue of `𝕍(q)` minus ½
    /// for a probability measure. 0 for uniform, ½ for a single axis.
    pub fn order_parameter(&self) -> f64 {
        self.second_moment().deviation()
    }

    /// Bin masses with every atom deposited into its containing bin.
    pub fn binned(&self) -> Vec<f64> {
        let n = self.bins.len();
        assert!(n > 0, "binning needs at least one bin");
        let mut out = self.bins.clone();
        for a in &self.atoms {
            out[bin_of(a.angle, n)] += a.weight;
        }
        out
    }

    /// Total variation of `self - other`.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().map(|a| Atom::new(a.angle, -a.weight)));
        let atoms = merge_atoms(atoms);
        let bins = add_bins(&self.bins, &other.bins, -1.0).unwrap_or_else(|_| {
            // Different binnings share no common cells; compare them as disjoint.
            self.bins.iter().chain(other.bins.iter()).copied().collect()
        });
        atoms.iter().map(|a| a.weight.abs()).sum::<f64>() + bins.iter().map(|b| b.abs()).sum::<f64>()
    }
}

/// One node of the speed distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedNode {
    pub speed: f64,
    pub weight: f64,
}

/// Probability measure `m` on the speed interval, given by nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedMeasure {
    nodes: Vec<SpeedNode>,
}

impl SpeedMeasure {
    pub fn new(nodes: Vec<SpeedNode>) -> Result<Self, MeasureError> {
        if nodes.is_empty() {
            return Err(MeasureError::EmptySpeeds);
        }
        for n in &nodes {
            if !(n.speed.is_finite() && n.speed > 0.0) {
                return Err(MeasureError::InvalidSpeed(n.speed));
            }
            check_weight("speed weight", n.weight)?;
        }
        let total: f64 = nodes.iter().map(|n| n.weight).sum();
        if (total - 1.0).abs() > SPEED_NORMALIZATION_TOL {
            return Err(MeasureError::SpeedNormalization(total));
        }
        Ok(Self { nodes })
    }

    /// `δ_s`.
    pub fn dirac(speed: f64) -> Result<Self, MeasureError> {
        Self::new(vec![SpeedNode { speed, weight: 1.0 }])
    }

    pub fn nodes(&self) -> &[SpeedNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_speed(&self) -> f64 {
        self.nodes.iter().map(|n| n.speed).fold(0.0, f64::max)
    }

    /// `∫ s² dm(s)`.
    pub fn second_moment(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight * n.speed * n.speed).sum()
    }
}

impl Default for SpeedMeasure {
    fn default() -> Self {
        Self::dirac(1.0).expect("unit speed")
    }
}

/// Direction measure attached to one speed node.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityComponent {
    pub speed: f64,
    pub directions: DirectionMeasure,
}

/// Nonnegative measure on `[s1, s2] × 𝕊¹` in tensor-product layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMeasure {
    components: Vec<VelocityComponent>,
}

impl VelocityMeasure {
    pub fn new(components: Vec<VelocityComponent>) -> Result<Self, MeasureError> {
        for c in &components {
            if !(c.speed.is_finite() && c.speed > 0.0) {
                return Err(MeasureError::InvalidSpeed(c.speed));
            }
        }
        Ok(Self { components })
    }

    pub fn zero() -> Self {
        Self {
            components: Vec::new(),
        }
    }

    pub fn components(&self) -> &[VelocityComponent] {
        &self.components
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|k| VelocityComponent {
                    speed: k.speed,
                    directions: k.directions.scaled(c),
                })
                .collect(),
        }
    }

    /// `p̄ = p(V)`.
    pub fn mass_bar(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.directions.total_mass())
            .sum()
    }

    /// Sum of the per-speed direction measures (speeds forgotten).
    pub fn direction_marginal(&self) -> Result<DirectionMeasure, MeasureError> {
        let n = self
            .components
            .iter()
            .map(|c| c.directions.n_theta())
            .max()
            .unwrap_or(0);
        let mut acc = DirectionMeasure::zero(n);
        for c in &self.components {
            acc = acc.add(&c.directions)?;
        }
        Ok(acc)
    }

    /// `∫ v dp(v)`.
    pub fn first_moment(&self) -> [f64; 2] {
        self.components.iter().fold([0.0; 2], |acc, c| {
            let m = c.directions.first_moment();
            [acc[0] + c.speed * m[0], acc[1] + c.speed * m[1]]
        })
    }

    /// `∫ v ⊗ v dp(v)`.
    pub fn second_moment(&self) -> Sym2 {
        let mut acc = Sym2::default();
        for c in &self.components {
            acc.add_scaled(c.directions.second_moment(), c.speed * c.speed);
        }
        acc
    }
}

/// Total variation norm.
pub trait TotalVariation {
    fn total_variation(&self) -> f64;
}

impl TotalVariation for DirectionMeasure {
    fn total_variation(&self) -> f64 {
        // Nonnegative by construction.
        self.total_mass()
    }
}

impl TotalVariation for VelocityMeasure {
    fn total_variation(&self) -> f64 {
        self.mass_bar()
    }
}

pub fn total_variation<M: TotalVariation + ?Sized>(mu: &M) -> f64 {
    mu.total_variation()
}

pub fn mass_bar(p: &VelocityMeasure) -> f64 {
    p.mass_bar()
}

/// Lifting `q̃ = m ⊗ q`.
pub fn lift(q: &DirectionMeasure, m: &SpeedMeasure) -> VelocityMeasure {
    VelocityMeasure {
        components: m
            .nodes()
            .iter()
            .map(|n| VelocityComponent {
                speed: n.speed,
                directions: q.scaled(n.weight),
            })
            .collect(),
    }
}

/// `Λ(p)(θ) = ∫_V |θ · v/‖v‖| dp(v)`. Speeds do not enter.
pub fn lambda_at(p: &VelocityMeasure, theta: f64) -> f64 {
    let t = unit_vector(theta);
    p.components
        .iter()
        .map(|c| c.directions.integrate_dir(|d| (t[0] * d[0] + t[1] * d[1]).abs()))
        .sum()
}

/// `Λ(p)` sampled at each of `angles`.
pub fn lambda_of(p: &VelocityMeasure, angles: &[f64]) -> Vec<f64> {
    angles.iter().map(|&a| lambda_at(p, a)).collect()
}

/// `B(p, q) = ∫ Λ(p)(θ) dq(θ)`.
pub fn alignment_b(p: &VelocityMeasure, q: &DirectionMeasure) -> f64 {
    q.integrate(|theta| lambda_at(p, theta))
}

/// Signed weights on one speed node; only produced as an arithmetic residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedComponent {
    pub speed: f64,
    pub atoms: Vec<Atom>,
    pub bins: Vec<f64>,
}

/// Signed velocity measure returned by [`turning_apply`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SignedVelocityMeasure {
    pub components: Vec<SignedComponent>,
}

impl SignedVelocityMeasure {
    /// Signed total mass.
    pub fn mass(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.atoms.iter().map(|a| a.weight).sum::<f64>() + c.bins.iter().sum::<f64>())
            .sum()
    }

    /// `∫ f(s, θ) d(self)`.
    pub fn integrate(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let n = c.bins.len();
                let a: f64 = c.atoms.iter().map(|a| a.weight * f(c.speed, a.angle)).sum();
                let b: f64 = c
                    .bins
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * f(c.speed, bin_center(j, n)))
                    .sum();
                a + b
            })
            .sum()
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.total_variation() <= tol
    }
}

impl TotalVariation for SignedVelocityMeasure {
    fn total_variation(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.atoms.iter().map(|a| a.weight.abs()).sum::<f64>()
                    + c.bins.iter().map(|b| b.abs()).sum::<f64>()
            })
            .sum()
    }
}

fn same_speed(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Turning operator `𝓛[q](p) = q̃ p̄ - p`.
pub fn turning_apply(
    q: &DirectionMeasure,
    m: &SpeedMeasure,
    p: &VelocityMeasure,
) -> Result<SignedVelocityMeasure, MeasureError> {
    let target = lift(q, m).scaled(p.mass_bar());
    let mut out: Vec<SignedComponent> = target
        .components
        .iter()
        .map(|c| SignedComponent {
            speed: c.speed,
            atoms: c.directions.atoms().to_vec(),
            bins: c.directions.bins().to_vec(),
        })
        .collect();
    for c in p.components() {
        let negated: Vec<Atom> = c
            .directions
            .atoms()
            .iter()
            .map(|a| Atom::new(a.angle, -a.weight))
            .collect();
        match out.iter_mut().find(|o| same_speed(o.speed, c.speed)) {
            Some(o) => {
                o.atoms.extend(negated);
                o.atoms = merge_atoms(std::mem::take(&mut o.atoms));
                o.bins = add_bins(&o.bins, c.directions.bins(), -1.0)?;
            }
            None => out.push(SignedComponent {
                speed: c.speed,
                atoms: negated,
                bins: c.directions.bins().iter().map(|b| -b).collect(),
            }),
        }
    }
    Ok(SignedVelocityMeasure { components: out })
}

pub fn first_moment(p: &VelocityMeasure) -> [f64; 2] {
    p.first_moment()
}

pub fn second_moment(p: &VelocityMeasure) -> Sym2 {
    p.second_moment()
}
