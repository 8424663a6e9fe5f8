//! Masking-state discrete flows.
//!
//! A discrete variable with `K` real states lives in `{0..K-1} ∪ {mask}`,
//! where the mask is the extra index `K`. The forward corruption keeps the
//! clean state with probability `t` and masks it otherwise; the reverse
//! process is a continuous-time Markov chain whose conditional rate matrix
//! only ever moves mass out of the mask, at rate `1/(1−t)` toward the
//! clean state.

use rand::Rng;

use crate::error::{Error, Result};

/// Amino-acid letters in index order.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];

pub const AMINO_ACID_SPACE: DiscreteSpace = DiscreteSpace::new(20);
pub const EC_SPACE: DiscreteSpace = DiscreteSpace::new(7);
pub const COEVO_SPACE: DiscreteSpace = DiscreteSpace::new(64);

/// Tolerance on Σ rates·dt above one that is absorbed by renormalization.
const JUMP_OVERSHOOT_TOLERANCE: f64 = 1e-9;

pub fn amino_acid_index(letter: char) -> Option<usize> {
    AMINO_ACIDS
        .iter()
        .position(|&c| c == letter.to_ascii_uppercase())
}

/// Categorical space with `num_real` real states plus a trailing mask state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteSpace {
    num_real: usize,
}

impl DiscreteSpace {
    pub const fn new(num_real: usize) -> Self {
        DiscreteSpace { num_real }
    }

    pub const fn num_real(&self) -> usize {
        self.num_real
    }

    pub const fn mask_index(&self) -> usize {
        self.num_real
    }

    pub fn num_states(&self) -> usize {
        self.num_real + 1
    }

    pub fn is_mask(&self, state: usize) -> bool {
        state == self.num_real
    }

    fn check_real(&self, state: usize) -> Result<()> {
        if state < self.num_real {
            Ok(())
        } else {
            Err(Error::InvalidState {
                state,
                num_real: self.num_real,
            })
        }
    }

    fn check_any(&self, state: usize) -> Result<()> {
        if state <= self.num_real {
            Ok(())
        } else {
            Err(Error::InvalidState {
                state,
                num_real: self.num_real,
            })
        }
    }
}

/// Off-diagonal jump rates out of `from_state`; the diagonal is the negated sum.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub from_state: usize,
    /// One entry per state (real states then mask); the `from_state` entry is zero.
    pub rates: Vec<f64>,
}

impl RateRow {
    pub fn zero(from_state: usize, space: DiscreteSpace) -> Self {
        RateRow {
            from_state,
            rates: vec![0.0; space.num_states()],
        }
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn diagonal(&self) -> f64 {
        -self.total()
    }
}

/// Samples `c_t` given the clean state `c1`: `c1` with probability `t`, mask otherwise.
pub fn corrupt_discrete<R: Rng + ?Sized>(
    c1: usize,
    t: f64,
    space: DiscreteSpace,
    rng: &mut R,
) -> Result<usize> {
    space.check_real(c1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            op: "corrupt_discrete",
            t,
        });
    }
    let u: f64 = rng.random();
    Ok(if u < t { c1 } else { space.mask_index() })
}

/// Conditional rate row R_t(c_t, · | c1) of the masking construction.
pub fn conditional_rate_row(
    c_t: usize,
    c1: usize,
    t: f64,
    space: DiscreteSpace,
) -> Result<RateRow> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain {
            op: "conditional_rate_row",
            t,
        });
    }
    space.check_any(c_t)?;
    space.check_real(c1)?;
    let mut row = RateRow::zero(c_t, space);
    if space.is_mask(c_t) {
        row.rates[c1] = 1.0 / (1.0 - t);
    }
    Ok(row)
}

/// Rate row averaged over a predicted distribution of the clean state.
pub fn expected_rate_row(
    c_t: usize,
    predicted: &[f64],
    t: f64,
    space: DiscreteSpace,
) -> Result<RateRow> {
    check_distribution(predicted, space)?;
    let mut row = RateRow::zero(c_t, space);
    for (c1, &p) in predicted.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let cond = conditional_rate_row(c_t, c1, t, space)?;
        for (acc, r) in row.rates.iter_mut().zip(&cond.rates) {
            *acc += p * r;
        }
    }
    Ok(row)
}

fn check_distribution(predicted: &[f64], space: DiscreteSpace) -> Result<()> {
    if predicted.len() != space.num_real() {
        return Err(Error::Shape(format!(
            "predicted distribution has {} entries, expected {}",
            predicted.len(),
            space.num_real()
        )));
    }
    let sum: f64 = predicted.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || predicted.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::Shape(format!(
            "predicted distribution is not on the simplex (sum {sum})"
        )));
    }
    Ok(())
}

/// One Euler step of the reverse CTMC: samples from δ(c_t, ·) + R_t(c_t, ·)·dt.
pub fn euler_discrete_step<R: Rng + ?Sized>(
    c_t: usize,
    predicted: &[f64],
    t: f64,
    dt: f64,
    space: DiscreteSpace,
    rng: &mut R,
) -> Result<usize> {
    if dt <= 0.0 || t + dt > 1.0 + 1e-12 {
        return Err(Error::Domain {
            op: "euler_discrete_step",
            t: t + dt,
        });
    }
    let row = expected_rate_row(c_t, predicted, t, space)?;
    if !space.is_mask(c_t) {
        return Ok(c_t);
    }
    let jump_total = row.total() * dt;
    let mut stay = 1.0 - jump_total;
    let mut scale = dt;
    if stay < 0.0 {
        if jump_total > 1.0 + JUMP_OVERSHOOT_TOLERANCE {
            return Err(Error::StepSize { stay });
        }
        scale = dt / jump_total;
        stay = 0.0;
    }
    let u: f64 = rng.random();
    let mut acc = stay;
    if u < acc {
        return Ok(c_t);
    }
    let mut last_nonzero = c_t;
    for (s, &r) in row.rates.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        last_nonzero = s;
        acc += r * scale;
        if u < acc {
            return Ok(s);
        }
    }
    // Rounding left a sliver of probability unassigned.
    Ok(last_nonzero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corruption_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(corrupt_discrete(3, 0.0, AMINO_ACID_SPACE, &mut rng).unwrap(), 20);
            assert_eq!(corrupt_discrete(3, 1.0, AMINO_ACID_SPACE, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn corruption_rejects_mask_and_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            corrupt_discrete(20, 0.5, AMINO_ACID_SPACE, &mut rng),
            Err(Error::InvalidState { .. })
        ));
        assert!(corrupt_discrete(99, 0.5, AMINO_ACID_SPACE, &mut rng).is_err());
    }

    #[test]
    fn corruption_frequency_matches_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let kept = (0..n)
            .filter(|_| corrupt_discrete(5, 0.3, AMINO_ACID_SPACE, &mut rng).unwrap() == 5)
            .count();
        let p = kept as f64 / n as f64;
        let sigma = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() <= 3.0 * sigma, "{p}");
    }

    #[test]
    fn rate_row_closed_form() {
        let row = conditional_rate_row(20, 3, 0.75, AMINO_ACID_SPACE).unwrap();
        assert_eq!(row.rates[3], 4.0);
        assert_eq!(row.total(), 4.0);
        assert_eq!(row.diagonal(), -4.0);
        for (s, r) in row.rates.iter().enumerate() {
            if s != 3 {
                assert_eq!(*r, 0.0);
            }
        }
        for c1 in 0..20 {
            let row = conditional_rate_row(3, c1, 0.4, AMINO_ACID_SPACE).unwrap();
            assert!(row.rates.iter().all(|r| *r == 0.0));
        }
        assert!(matches!(
            conditional_rate_row(20, 3, 1.0, AMINO_ACID_SPACE),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn expected_rate_under_uniform_prediction() {
        let space = DiscreteSpace::new(4);
        let row = expected_rate_row(4, &[0.25; 4], 0.5, space).unwrap();
        assert_eq!(&row.rates[..4], &[0.5; 4]);
        assert_eq!(row.rates[4], 0.0);
    }

    #[test]
    fn unmasked_state_is_absorbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = [0.05; 20];
        for _ in 0..100 {
            assert_eq!(
                euler_discrete_step(7, &p, 0.3, 0.1, AMINO_ACID_SPACE, &mut rng).unwrap(),
                7
            );
        }
    }

    #[test]
    fn jump_probability_is_dt_over_one_minus_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = [0.0; 20];
        p[2] = 1.0;
        let n = 10_000;
        let jumps = (0..n)
            .filter(|_| euler_discrete_step(20, &p, 0.5, 0.1, AMINO_ACID_SPACE, &mut rng).unwrap() == 2)
            .count();
        let freq = jumps as f64 / n as f64;
        let sigma = (0.2f64 * 0.8 / n as f64).sqrt();
        assert!((freq - 0.2).abs() <= 3.0 * sigma, "{freq}");
    }

    #[test]
    fn final_step_is_certain_and_overshoot_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = [0.0; 7];
        p[6] = 1.0;
        // dt/(1−t) = 1 at the last step of a 50-step grid
        let t = 49.0 / 50.0;
        for _ in 0..100 {
            assert_eq!(
                euler_discrete_step(7, &p, t, 1.0 / 50.0, EC_SPACE, &mut rng).unwrap(),
                6
            );
        }
        assert!(matches!(
            euler_discrete_step(7, &p, 0.5, 0.5, EC_SPACE, &mut rng),
            Ok(6)
        ));
        assert!(euler_discrete_step(7, &p, 0.9, 0.2, EC_SPACE, &mut rng).is_err());
        assert!(matches!(
            euler_discrete_step(7, &[0.5; 7], 0.1, 0.1, EC_SPACE, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn absorption_with_oracle_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps = 50;
        let dt = 1.0 / steps as f64;
        let mut p = [0.0; 64];
        p[17] = 1.0;
        let mut hits = 0;
        for _ in 0..1000 {
            let mut c = COEVO_SPACE.mask_index();
            for k in 0..steps {
                c = euler_discrete_step(c, &p, k as f64 * dt, dt, COEVO_SPACE, &mut rng).unwrap();
            }
            hits += (c == 17) as usize;
        }
        assert!(hits as f64 / 1000.0 >= 0.99);
    }

    #[test]
    fn letters_roundtrip() {
        for (i, &c) in AMINO_ACIDS.iter().enumerate() {
            assert_eq!(amino_acid_index(c), Some(i));
            assert_eq!(amino_acid_index(c.to_ascii_lowercase()), Some(i));
        }
        assert_eq!(amino_acid_index('B'), None);
    }
}
