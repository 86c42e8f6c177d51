//! Background (expected) mortality as a piecewise-constant rate by
//! attained age.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LifetableDef", into = "LifetableDef")]
pub struct Lifetable {
    ages: Vec<f64>,
    rates: Vec<f64>,
    /// Cumulative hazard from `ages[0]` to `ages[k]`.
    cum: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LifetableDef {
    ages: Vec<f64>,
    rates: Vec<f64>,
}

impl TryFrom<LifetableDef> for Lifetable {
    type Error = Error;
    fn try_from(d: LifetableDef) -> Result<Self> {
        Lifetable::new(d.ages, d.rates)
    }
}

impl From<Lifetable> for LifetableDef {
    fn from(t: Lifetable) -> Self {
        LifetableDef {
            ages: t.ages,
            rates: t.rates,
        }
    }
}

impl Lifetable {
    /// `ages[k]` is the start of the band with rate `rates[k]` (per year).
    /// The first rate also applies below `ages[0]`, the last one beyond the
    /// final band start.
    pub fn new(ages: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if ages.is_empty() || ages.len() != rates.len() {
            return Err(Error::config(
                "lifetable needs equal, non-zero numbers of ages and rates",
            ));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("lifetable ages must be strictly ascending"));
        }
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config(
                "lifetable rates must be finite and non-negative",
            ));
        }
        let mut cum = vec![0.0; ages.len()];
        for k in 1..ages.len() {
            cum[k] = cum[k - 1] + rates[k - 1] * (ages[k] - ages[k - 1]);
        }
        Ok(Self { ages, rates, cum })
    }

    /// Table of band-averaged Gompertz rates `lambda * exp(gamma * age)`,
    /// exact in cumulative hazard at every band boundary.
    pub fn from_gompertz(lambda: f64, gamma: f64, step: f64, max_age: f64) -> Result<Self> {
        let n = (max_age / step).ceil() as usize;
        let cum = |a: f64| lambda / gamma * ((gamma * a).exp() - 1.0);
        let ages: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        let rates = ages
            .iter()
            .map(|&a| (cum(a + step) - cum(a)) / step)
            .collect();
        Self::new(ages, rates)
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    fn band(&self, age: f64) -> usize {
        self.ages.partition_point(|&a| a <= age).saturating_sub(1)
    }

    pub fn rate(&self, age: f64) -> f64 {
        self.rates[self.band(age)]
    }

    /// Cumulative hazard from `ages[0]` to `age` (negative below it).
    fn cum_to(&self, age: f64) -> f64 {
        let k = self.band(age);
        self.cum[k] + self.rates[k] * (age - self.ages[k])
    }

    /// Background cumulative hazard over `t` years from baseline `age`.
    pub fn cumulative_hazard(&self, age: f64, t: f64) -> f64 {
        self.cum_to(age + t) - self.cum_to(age)
    }

    /// Background hazard at time `t` after baseline `age`.
    pub fn hazard(&self, age: f64, t: f64) -> f64 {
        self.rate(age + t)
    }

    pub fn survival(&self, age: f64, t: f64) -> f64 {
        (-self.cumulative_hazard(age, t)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_integration() {
        let t = Lifetable::new(vec![50.0, 60.0, 70.0], vec![0.01, 0.02, 0.05]).unwrap();
        assert_eq!(t.rate(40.0), 0.01);
        assert_eq!(t.rate(65.0), 0.02);
        assert_eq!(t.rate(90.0), 0.05);
        // 55 -> 75: 5*0.01 + 10*0.02 + 5*0.05
        let h = t.cumulative_hazard(55.0, 20.0);
        assert!((h - 0.5).abs() < 1e-12);
        assert_eq!(t.cumulative_hazard(61.0, 0.0), 0.0);
    }

    #[test]
    fn gompertz_table_exact_at_band_edges() {
        let (l, g) = (4.3e-5, 0.094);
        let t = Lifetable::from_gompertz(l, g, 0.25, 130.0).unwrap();
        let exact = |a: f64, dt: f64| l / g * (g * a).exp() * ((g * dt).exp() - 1.0);
        assert!((t.cumulative_hazard(60.0, 10.0) - exact(60.0, 10.0)).abs() < 1e-12);
        assert!((t.cumulative_hazard(57.3, 3.1) / exact(57.3, 3.1) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(Lifetable::new(vec![1.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(Lifetable::new(vec![1.0], vec![-0.1]).is_err());
        assert!(Lifetable::new(vec![], vec![]).is_err());
    }
}
