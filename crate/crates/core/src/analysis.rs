//! Source characterization from a joint photon-number distribution.
//!
//! * equivalent mode number `M = <n>^2 / ((Dn)^2 - <n>)` per arm;
//! * the normalized count-difference statistic
//!   `<delta^2> = E[(n/<n> - n'/<n'>)^2] / (1/<n> + 1/<n'>)`, which is `>= 1`
//!   for classical light and `1 - 2/(1/eta + 1/eta')` for the model, so that
//!   `1 - <delta^2>` measures the efficiency;
//! * contamination of single pairs `eps2 = 1 - rho[1][1] / sum_{k+l>=2} rho`
//!   and of double pairs `eps4 = 1 - rho[2][2] / sum_{k+l>=4} rho`.
//!
//! Moments are taken over the grid and renormalized by the grid mass; when
//! the tail mass exceeds [`TAIL_WARNING`] the characterization is flagged as
//! truncated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{joint_distribution, n_max_for_tail, EffectiveSource, JointDistribution};

/// Tail mass above which estimates carry bounds or a truncation flag.
pub const TAIL_WARNING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    A,
    B,
}

/// Mean and variance of one arm's photon number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMoments {
    pub mean: f64,
    pub variance: f64,
}

fn grid_mass(rho: &JointDistribution) -> Result<f64> {
    let mass = rho.grid_mass();
    if !(mass > 0.0) {
        return Err(Error::degenerate("distribution has no mass on its grid"));
    }
    Ok(mass)
}

pub fn arm_moments(rho: &JointDistribution, arm: Arm) -> Result<ArmMoments> {
    let mass = grid_mass(rho)?;
    let marginal = match arm {
        Arm::A => rho.marginal_a(),
        Arm::B => rho.marginal_b(),
    };
    let mean = crate::sum::sum(marginal.iter().enumerate().map(|(n, p)| n as f64 * p)) / mass;
    let second = crate::sum::sum(marginal.iter().enumerate().map(|(n, p)| (n * n) as f64 * p)) / mass;
    Ok(ArmMoments { mean, variance: second - mean * mean })
}

/// Equivalent number of modes read off one arm's marginal.
pub fn mode_number(rho: &JointDistribution, arm: Arm) -> Result<f64> {
    let ArmMoments { mean, variance } = arm_moments(rho, arm)?;
    if !(mean > 0.0) {
        return Err(Error::degenerate(format!("arm {arm:?} has zero mean photon number")));
    }
    if !(variance > mean) {
        return Err(Error::SubPoissonianMarginal { mean, variance });
    }
    Ok(mean * mean / (variance - mean))
}

/// `<delta^2>` evaluated exactly from the first and second moments of `rho`.
pub fn delta_squared(rho: &JointDistribution) -> Result<f64> {
    let mass = grid_mass(rho)?;
    let k = rho.n_max() + 1;
    let p = rho.probs();
    let mut sums = [crate::sum::Compensated::default(); 5];
    for n in 0..k {
        for m in 0..k {
            let v = p[(n, m)];
            if v == 0.0 {
                continue;
            }
            let (x, y) = (n as f64, m as f64);
            sums[0].add(x * v);
            sums[1].add(y * v);
            sums[2].add(x * x * v);
            sums[3].add(y * y * v);
            sums[4].add(x * y * v);
        }
    }
    let [mean_a, mean_b, sq_a, sq_b, cross] = sums.map(|s| s.value() / mass);
    if !(mean_a > 0.0 && mean_b > 0.0) {
        return Err(Error::degenerate(format!(
            "<delta^2> needs both mean photon numbers > 0 (got {mean_a}, {mean_b})"
        )));
    }
    let numerator = sq_a / (mean_a * mean_a) + sq_b / (mean_b * mean_b) - 2.0 * cross / (mean_a * mean_b);
    Ok(numerator / (1.0 / mean_a + 1.0 / mean_b))
}

/// `1 - <delta^2>`; `classical` is set when the value is not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub value: f64,
    pub classical: bool,
}

pub fn efficiency(rho: &JointDistribution) -> Result<Efficiency> {
    let value = 1.0 - delta_squared(rho)?;
    Ok(Efficiency { value, classical: value <= 0.0 })
}

/// Contamination parameter with optional bounds from the truncated tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contamination {
    /// Value with the tail mass counted in the multiphoton sector.
    pub value: f64,
    /// `(without tail, with tail)` when the tail mass is above [`TAIL_WARNING`].
    pub bounds: Option<(f64, f64)>,
}

/// Which postselected term a contamination parameter refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOrder {
    /// `|1,1>`, parameter `eps2`
    Single,
    /// `|2,2>`, parameter `eps4`
    Double,
}

impl PairOrder {
    pub fn pairs(self) -> usize {
        match self {
            PairOrder::Single => 1,
            PairOrder::Double => 2,
        }
    }

    /// Total photon number labelling the parameter (2 or 4).
    pub fn photons(self) -> usize {
        2 * self.pairs()
    }

    pub fn from_photons(which: usize) -> Result<Self> {
        match which {
            2 => Ok(PairOrder::Single),
            4 => Ok(PairOrder::Double),
            other => Err(Error::validation(format!("contamination order must be 2 or 4 (got {other})"))),
        }
    }
}

/// Grid mass with `k + l >= threshold`.
fn sector_mass(rho: &JointDistribution, threshold: usize) -> f64 {
    let k = rho.n_max() + 1;
    let p = rho.probs();
    crate::sum::sum((0..k).flat_map(|n| (threshold.saturating_sub(n)..k).map(move |m| p[(n, m)])))
}

pub fn contamination(rho: &JointDistribution, order: PairOrder) -> Result<Contamination> {
    let pairs = order.pairs();
    let on_grid = sector_mass(rho, order.photons());
    // off-grid cells have k + l > n_max, so the whole tail lies in the sector
    // once n_max + 1 >= 2K
    let tail = rho.tail_mass();
    let denominator = on_grid + tail;
    if !(denominator > 0.0) {
        return Err(Error::degenerate(format!("empty {}-photon sector", order.photons())));
    }
    let target = rho.get(pairs, pairs);
    let value = 1.0 - target / denominator;
    let exact = rho.n_max() + 1 >= order.photons();
    let bounds = (tail > TAIL_WARNING || (!exact && tail > 0.0)).then(|| {
        let lower = if on_grid > 0.0 { 1.0 - target / on_grid } else { f64::NEG_INFINITY };
        (lower, value)
    });
    Ok(Contamination { value: value.clamp(0.0, 1.0), bounds })
}

/// `eps2`
pub fn contamination2(rho: &JointDistribution) -> Result<Contamination> {
    contamination(rho, PairOrder::Single)
}

/// `eps4`
pub fn contamination4(rho: &JointDistribution) -> Result<Contamination> {
    contamination(rho, PairOrder::Double)
}

/// Production rate `rho[K][K]` of the postselected term for a model source.
pub fn production_rate(src: &EffectiveSource, order: PairOrder) -> f64 {
    let k = order.pairs();
    joint_distribution(src, k).get(k, k)
}

/// Contamination of a model source, with the grid large enough that the
/// certified tail is negligible next to the postselected rate.
pub fn model_contamination(src: &EffectiveSource, order: PairOrder) -> Result<f64> {
    let rate = production_rate(src, order);
    if !(rate > 0.0) {
        return Err(Error::degenerate("postselected term has zero probability"));
    }
    let n_max = n_max_for_tail(src, 1e-14 * rate)?.max(order.photons());
    let rho = joint_distribution(src, n_max);
    let denominator = sector_mass(&rho, order.photons());
    Ok((1.0 - rate / denominator).clamp(0.0, 1.0))
}

/// Lower end of the pair-number search.
pub const MIN_MEAN_PAIRS: f64 = 1e-12;
const MAX_MEAN_PAIRS: f64 = 1e12;

/// Smallest `N` at which the model with efficiencies `eta = eta' = eta` and
/// `modes` modes produces the postselected term with probability `rate`.
/// `None` if no `N` reaches that rate.
pub fn solve_mean_pairs(eta: f64, modes: f64, order: PairOrder, rate: f64) -> Result<Option<f64>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::validation(format!("production rate {rate} must lie in (0, 1)")));
    }
    let probe = EffectiveSource::new(1.0, eta, eta, modes)?;
    let f = |n: f64| production_rate(&probe.with_mean_pairs(n).expect("N > 0"), order);

    let mut lo = 0.0;
    let mut hi = MIN_MEAN_PAIRS;
    let mut f_prev = 0.0;
    loop {
        let v = f(hi);
        if v >= rate {
            break;
        }
        if v < f_prev {
            // past the maximum of the unimodal rate curve before reaching `rate`
            let (peak, f_peak) = golden_max(&f, hi / 4.0, hi);
            if f_peak < rate {
                return Ok(None);
            }
            lo = hi / 4.0;
            hi = peak;
            break;
        }
        if hi >= MAX_MEAN_PAIRS {
            return Ok(None);
        }
        f_prev = v;
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(hi))
}

/// Maximum of a unimodal function on `[lo, hi]` by golden-section search in `ln N`.
fn golden_max(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let g = 0.5 * (libm::sqrt(5.0) - 1.0);
    let (mut a, mut b) = (libm::log(lo), libm::log(hi));
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(libm::exp(c));
    let mut fd = f(libm::exp(d));
    for _ in 0..200 {
        if b - a < 1e-13 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(libm::exp(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(libm::exp(d));
        }
    }
    let x = libm::exp(0.5 * (a + b));
    (x, f(x))
}

/// Contamination surface over (efficiency, production rate).
#[derive(Debug, Clone, PartialEq)]
pub struct ContaminationMap {
    pub order: PairOrder,
    pub modes: f64,
    pub etas: Vec<f64>,
    pub rates: Vec<f64>,
    /// Row-major `etas.len() x rates.len()`; `None` where the rate is unreachable.
    pub values: Vec<Option<f64>>,
}

impl ContaminationMap {
    pub fn get(&self, eta_index: usize, rate_index: usize) -> Option<f64> {
        self.values[eta_index * self.rates.len() + rate_index]
    }
}

/// Contamination for every `(eta, rate)` pair, with `eta = eta'` and the
/// production rate interpreted as the per-pulse probability `rho[K][K]`.
pub fn contamination_map(
    eta_grid: &[f64],
    rate_grid: &[f64],
    modes: f64,
    order: PairOrder,
) -> Result<ContaminationMap> {
    if eta_grid.is_empty() || rate_grid.is_empty() {
        return Err(Error::validation("efficiency and rate grids must be non-empty"));
    }
    let mut values = Vec::with_capacity(eta_grid.len() * rate_grid.len());
    for &eta in eta_grid {
        for &rate in rate_grid {
            let cell = match solve_mean_pairs(eta, modes, order, rate)? {
                Some(n) => Some(model_contamination(&EffectiveSource::new(n, eta, eta, modes)?, order)?),
                None => None,
            };
            values.push(cell);
        }
    }
    Ok(ContaminationMap { order, modes, etas: eta_grid.to_vec(), rates: rate_grid.to_vec(), values })
}

/// Every estimator applied to one distribution; failures are kept per field.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCharacterization {
    pub mean_n: Result<f64>,
    pub mean_n_prime: Result<f64>,
    pub var_n: Result<f64>,
    pub var_n_prime: Result<f64>,
    /// Average of the defined per-arm mode numbers.
    pub m_hat: Result<f64>,
    pub m_hat_a: Result<f64>,
    pub m_hat_b: Result<f64>,
    pub delta_sq: Result<f64>,
    /// `1 - delta_sq`
    pub eta_hat: Result<Efficiency>,
    pub eps2: Result<Contamination>,
    pub eps4: Result<Contamination>,
    /// `rho[1][1]`
    pub p11: f64,
    /// `rho[2][2]`
    pub p22: f64,
    pub tail_mass: f64,
    pub truncated: bool,
}

pub fn characterize(rho: &JointDistribution) -> SourceCharacterization {
    let a = arm_moments(rho, Arm::A);
    let b = arm_moments(rho, Arm::B);
    let m_hat_a = mode_number(rho, Arm::A);
    let m_hat_b = mode_number(rho, Arm::B);
    let m_hat = match (&m_hat_a, &m_hat_b) {
        (Ok(x), Ok(y)) => Ok(0.5 * (x + y)),
        (Ok(x), Err(_)) | (Err(_), Ok(x)) => Ok(*x),
        (Err(e), Err(_)) => Err(e.clone()),
    };
    SourceCharacterization {
        mean_n: a.clone().map(|m| m.mean),
        mean_n_prime: b.clone().map(|m| m.mean),
        var_n: a.map(|m| m.variance),
        var_n_prime: b.map(|m| m.variance),
        m_hat,
        m_hat_a,
        m_hat_b,
        delta_sq: delta_squared(rho),
        eta_hat: efficiency(rho),
        eps2: contamination2(rho),
        eps4: contamination4(rho),
        p11: rho.get(1, 1),
        p22: rho.get(2, 2),
        tail_mass: rho.tail_mass(),
        truncated: rho.tail_mass() > TAIL_WARNING,
    }
}

impl SourceCharacterization {
    /// `(key, value)` pairs; failed estimators appear with their error kind.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        fn show(r: &Result<f64>) -> String {
            match r {
                Ok(v) => format!("{v}"),
                Err(e) => format!("error:{}", e.kind()),
            }
        }
        let mut out = alloc::vec![
            ("mean_n", show(&self.mean_n)),
            ("mean_n_prime", show(&self.mean_n_prime)),
            ("var_n", show(&self.var_n)),
            ("var_n_prime", show(&self.var_n_prime)),
            ("M_hat", show(&self.m_hat)),
            ("M_hat_a", show(&self.m_hat_a)),
            ("M_hat_b", show(&self.m_hat_b)),
            ("delta_sq", show(&self.delta_sq)),
        ];
        out.push(("eta_hat", show(&self.eta_hat.clone().map(|e| e.value))));
        if let Ok(e) = &self.eta_hat {
            if e.classical {
                out.push(("eta_hat.warning", String::from("classical_or_noisy")));
            }
        }
        for (key, lo_key, hi_key, c) in
            [("eps2", "eps2.lower", "eps2.upper", &self.eps2), ("eps4", "eps4.lower", "eps4.upper", &self.eps4)]
        {
            out.push((key, show(&c.clone().map(|c| c.value))));
            if let Ok(Contamination { bounds: Some((lo, hi)), .. }) = c {
                out.push((lo_key, format!("{lo}")));
                out.push((hi_key, format!("{hi}")));
            }
        }
        out.push(("p11", format!("{}", self.p11)));
        out.push(("p22", format!("{}", self.p22)));
        out.push(("tail_mass", format!("{}", self.tail_mass)));
        out.push(("truncated", format!("{}", self.truncated)));
        out
    }
}
