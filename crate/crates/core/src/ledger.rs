//! Communication accounting in model-units, plus the analytic cost model the
//! measured traffic is checked against.
//!
//! The unit of account is one full model copy; byte conversion is purely
//! presentational. All analytic quantities are exact rationals, so the
//! headline numbers (greedy cost, protocol bound, savings, sweep fractions)
//! carry no floating error.

use crate::error::{Error, Result};
use crate::protocol::{EventKind, RoundEvent};
use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Sub};

/// Exact rational number over `i128` with a positive, reduced denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    num: i128,
    den: i128,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Rational {
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den != 0, "zero denominator");
        let sign = if den < 0 { -1 } else { 1 };
        let g = gcd(num, den);
        Rational {
            num: sign * num / g,
            den: sign * den / g,
        }
    }

    pub fn from_int(value: i128) -> Self {
        Rational { num: value, den: 1 }
    }

    pub fn zero() -> Self {
        Rational::from_int(0)
    }

    pub fn one() -> Self {
        Rational::from_int(1)
    }

    /// Parses a plain or exponent-form decimal literal exactly
    /// (`"0.1"` becomes 1/10, `"2.5e-3"` becomes 1/400).
    pub fn from_decimal_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let (mantissa, exponent) = match text.find(['e', 'E']) {
            Some(pos) => {
                let exp: i32 = text[pos + 1..]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad exponent in '{text}'")))?;
                (&text[..pos], exp)
            }
            None => (text, 0),
        };
        let (sign, digits) = match mantissa.strip_prefix('-') {
            Some(rest) => (-1i128, rest),
            None => (1i128, mantissa.strip_prefix('+').unwrap_or(mantissa)),
        };
        let (int_part, frac_part) = match digits.find('.') {
            Some(pos) => (&digits[..pos], &digits[pos + 1..]),
            None => (digits, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(Error::Config(format!("'{text}' is not a decimal number")));
        }
        let mut num: i128 = 0;
        for ch in int_part.chars().chain(frac_part.chars()) {
            let digit = ch
                .to_digit(10)
                .ok_or_else(|| Error::Config(format!("'{text}' is not a decimal number")))?;
            num = num
                .checked_mul(10)
                .and_then(|n| n.checked_add(digit as i128))
                .ok_or_else(|| Error::Config(format!("'{text}' overflows")))?;
        }
        let scale = frac_part.len() as i32 - exponent;
        let value = if scale >= 0 {
            Rational::new(sign * num, 10i128.pow(scale as u32))
        } else {
            Rational::new(sign * num * 10i128.pow((-scale) as u32), 1)
        };
        Ok(value)
    }

    /// Exact rational of an `f64`'s shortest decimal representation. Intended
    /// for human-entered config values such as sample rates.
    pub fn from_f64_decimal(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Config(format!("{value} is not a finite number")));
        }
        Rational::from_decimal_str(&format!("{value}"))
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    /// Integer ceiling of the rational.
    pub fn ceil_int(self) -> i128 {
        if self.num >= 0 {
            (self.num + self.den - 1) / self.den
        } else {
            self.num / self.den
        }
    }
}

impl Add for Rational {
    type Output = Rational;
    fn add(self, rhs: Rational) -> Rational {
        Rational::new(self.num * rhs.den + rhs.num * self.den, self.den * rhs.den)
    }
}

impl Sub for Rational {
    type Output = Rational;
    fn sub(self, rhs: Rational) -> Rational {
        Rational::new(self.num * rhs.den - rhs.num * self.den, self.den * rhs.den)
    }
}

impl Mul for Rational {
    type Output = Rational;
    fn mul(self, rhs: Rational) -> Rational {
        Rational::new(self.num * rhs.num, self.den * rhs.den)
    }
}

impl Div for Rational {
    type Output = Rational;
    fn div(self, rhs: Rational) -> Rational {
        assert!(rhs.num != 0, "division by zero rational");
        Rational::new(self.num * rhs.den, self.den * rhs.num)
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Rational) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Rational) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// The protocol parameters entering the analytic cost model.
#[derive(Debug, Clone)]
pub struct CostModelParams {
    pub client_count: usize,
    pub sample_rate: Rational,
    pub helper_capacity: usize,
    pub replace_count: usize,
    pub search_rounds: usize,
    pub update_period: usize,
    pub total_rounds: usize,
}

/// Greedy-search traffic in model-units: every sampled client uploads once
/// and downloads all peers every round, totalling `tau * K^2 * n`.
pub fn cost1(sample_rate: Rational, client_count: usize, rounds: usize) -> Rational {
    let k = Rational::from_int(client_count as i128);
    sample_rate * k * k * Rational::from_int(rounds as i128)
}

/// Upper bound of the protocol traffic in model-units:
/// `K*M*n/nu + F*R*K + tau*K*n`.
pub fn cost2_bound(p: &CostModelParams) -> Rational {
    let k = Rational::from_int(p.client_count as i128);
    let m = Rational::from_int(p.helper_capacity as i128);
    let n = Rational::from_int(p.total_rounds as i128);
    let nu = Rational::from_int(p.update_period as i128);
    let search = Rational::from_int((p.search_rounds * p.replace_count) as i128);
    k * m * n / nu + search * k + p.sample_rate * k * n
}

/// Savings of the protocol over greedy search: `(delta, fraction_saved)`.
/// A zero greedy cost reports a zero fraction.
pub fn savings_delta(p: &CostModelParams) -> (Rational, Rational) {
    let greedy = cost1(p.sample_rate, p.client_count, p.total_rounds);
    let delta = greedy - cost2_bound(p);
    let percent = if greedy.is_zero() {
        Rational::zero()
    } else {
        delta / greedy
    };
    (delta, percent)
}

/// Analytic cost fraction of an update-period sweep relative to the
/// every-round baseline (`nu = 1`): `cost2(nu) / cost2(1)`.
pub fn nu_sweep_cost_fraction(base: &CostModelParams, update_period: usize) -> Rational {
    let at = |nu: usize| {
        cost2_bound(&CostModelParams {
            update_period: nu,
            ..base.clone()
        })
    };
    at(update_period) / at(1)
}

/// Analytic cost fraction of a sample-rate sweep relative to the full
/// participation baseline (`tau = 1`).
///
/// The sweep normalization counts the update and search terms once
/// system-wide rather than per client (`tau*K*n + M*n/nu + F*R`), the
/// convention under which the reference sweep percentages are consistent;
/// the per-client bound itself stays `cost2_bound`.
pub fn tau_sweep_cost_fraction(base: &CostModelParams, sample_rate: Rational) -> Rational {
    let k = Rational::from_int(base.client_count as i128);
    let n = Rational::from_int(base.total_rounds as i128);
    let m = Rational::from_int(base.helper_capacity as i128);
    let nu = Rational::from_int(base.update_period as i128);
    let search = Rational::from_int((base.search_rounds * base.replace_count) as i128);
    let fixed = m * n / nu + search;
    (sample_rate * k * n + fixed) / (k * n + fixed)
}

/// Analytic cost fraction of a search-horizon sweep normalized to a
/// reference horizon: `cost2(F) / cost2(F_ref)`.
pub fn f_sweep_cost_fraction(
    base: &CostModelParams,
    search_rounds: usize,
    reference: usize,
) -> Rational {
    let at = |f: usize| {
        cost2_bound(&CostModelParams {
            search_rounds: f,
            ..base.clone()
        })
    };
    at(search_rounds) / at(reference)
}

/// Per-round traffic counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundCounters {
    pub round: u64,
    pub uploads: u64,
    pub downloads: u64,
}

/// Monotone counters of every model transfer, in model-units.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    uploads: u64,
    downloads: u64,
    fill_downloads: u64,
    per_round: Vec<RoundCounters>,
    model_unit_bytes: Option<u64>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    fn row(&mut self, round: u64) -> &mut RoundCounters {
        while self.per_round.len() <= round as usize {
            let next = self.per_round.len() as u64;
            self.per_round.push(RoundCounters {
                round: next,
                ..RoundCounters::default()
            });
        }
        &mut self.per_round[round as usize]
    }

    pub fn record_upload(&mut self, round: u64) {
        self.uploads += 1;
        self.row(round).uploads += 1;
    }

    pub fn record_download(&mut self, round: u64) {
        self.downloads += 1;
        self.row(round).downloads += 1;
    }

    /// A helper-list fill download: charged like any download but tracked
    /// separately because the analytic bound does not include the initial
    /// fill.
    pub fn record_fill_download(&mut self, round: u64) {
        self.fill_downloads += 1;
        self.record_download(round);
    }

    pub fn uploads(&self) -> u64 {
        self.uploads
    }

    pub fn downloads(&self) -> u64 {
        self.downloads
    }

    pub fn fill_downloads(&self) -> u64 {
        self.fill_downloads
    }

    pub fn total(&self) -> u64 {
        self.uploads + self.downloads
    }

    pub fn per_round(&self) -> &[RoundCounters] {
        &self.per_round
    }

    pub fn set_model_unit_bytes(&mut self, bytes: u64) {
        self.model_unit_bytes = Some(bytes);
    }

    pub fn model_unit_bytes(&self) -> Option<u64> {
        self.model_unit_bytes
    }

    /// Counter/per-round consistency.
    pub fn validate(&self) -> Result<()> {
        let up: u64 = self.per_round.iter().map(|r| r.uploads).sum();
        let down: u64 = self.per_round.iter().map(|r| r.downloads).sum();
        if up != self.uploads || down != self.downloads {
            return Err(Error::Consistency(format!(
                "ledger totals ({}, {}) differ from per-round sums ({up}, {down})",
                self.uploads, self.downloads
            )));
        }
        Ok(())
    }
}

/// Outcome of checking a finished run against the analytic bound.
#[derive(Debug, Clone)]
pub struct ReconcileReport {
    pub measured_uploads: u64,
    pub measured_downloads: u64,
    pub fill_downloads: u64,
    /// `cost2_bound` at the realized sample count plus the initial-fill
    /// allowance `K * min(M-1, K-1)`.
    pub bound_with_fill: Rational,
    pub slack: Rational,
    pub trace_matches_ledger: bool,
    pub within_bound: bool,
}

impl ReconcileReport {
    pub fn ok(&self) -> bool {
        self.trace_matches_ledger && self.within_bound
    }
}

/// Cross-checks the ledger against the event trace and the analytic bound.
///
/// The bound evaluates the upload term at the realized per-round sample
/// count `ceil(tau * K)` and adds the documented initial-fill constant
/// `K * min(M-1, K-1)`, which the bound formula does not include.
pub fn reconcile(
    ledger: &CostLedger,
    events: &[RoundEvent],
    params: &CostModelParams,
) -> ReconcileReport {
    let mut trace_uploads = 0u64;
    let mut trace_downloads = 0u64;
    for event in events {
        match event.kind {
            EventKind::Upload => trace_uploads += event.model_units,
            EventKind::Replace | EventKind::Update | EventKind::Sample => {
                trace_downloads += event.model_units
            }
            _ => {}
        }
    }
    let trace_matches_ledger = trace_uploads == ledger.uploads()
        && trace_downloads == ledger.downloads()
        && ledger.validate().is_ok();

    let k = params.client_count;
    let sampled = (params.sample_rate * Rational::from_int(k as i128))
        .ceil_int()
        .max(1);
    let effective_rate = Rational::new(sampled, k as i128);
    let bound = cost2_bound(&CostModelParams {
        sample_rate: effective_rate,
        ..params.clone()
    });
    let fill_allowance = Rational::from_int((k * (params.helper_capacity - 1).min(k - 1)) as i128);
    let bound_with_fill = bound + fill_allowance;
    let measured = Rational::from_int(ledger.total() as i128);
    let slack = bound_with_fill - measured;
    let within_bound = measured <= bound_with_fill;

    ReconcileReport {
        measured_uploads: ledger.uploads(),
        measured_downloads: ledger.downloads(),
        fill_downloads: ledger.fill_downloads(),
        bound_with_fill,
        slack,
        trace_matches_ledger,
        within_bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_defaults() -> CostModelParams {
        CostModelParams {
            client_count: 100,
            sample_rate: Rational::new(1, 10),
            helper_capacity: 5,
            replace_count: 2,
            search_rounds: 30,
            update_period: 10,
            total_rounds: 200,
        }
    }

    #[test]
    fn rational_decimal_parsing() {
        assert_eq!(
            Rational::from_decimal_str("0.1").unwrap(),
            Rational::new(1, 10)
        );
        assert_eq!(
            Rational::from_decimal_str("0.05").unwrap(),
            Rational::new(1, 20)
        );
        assert_eq!(Rational::from_decimal_str("1").unwrap(), Rational::one());
        assert_eq!(
            Rational::from_decimal_str("2.5e-3").unwrap(),
            Rational::new(1, 400)
        );
        assert_eq!(
            Rational::from_decimal_str("1e2").unwrap(),
            Rational::from_int(100)
        );
        assert_eq!(
            Rational::from_f64_decimal(0.2).unwrap(),
            Rational::new(1, 5)
        );
        assert!(Rational::from_decimal_str("abc").is_err());
    }

    #[test]
    fn rational_arithmetic_is_exact() {
        let tau = Rational::new(1, 10);
        let x = tau * Rational::from_int(100) * Rational::from_int(200);
        assert_eq!(x, Rational::from_int(2000));
        assert_eq!(Rational::new(2, 4), Rational::new(1, 2));
        assert!(Rational::new(1, 3) < Rational::new(1, 2));
        assert_eq!(Rational::new(7, 2).ceil_int(), 4);
        assert_eq!(Rational::new(8, 2).ceil_int(), 4);
    }

    #[test]
    fn cost1_examples() {
        // tau K^2 n at the reference defaults is 2000 per K model-units.
        let c1 = cost1(Rational::new(1, 10), 100, 200);
        assert_eq!(c1, Rational::from_int(200_000));
        assert_eq!(c1 / Rational::from_int(100), Rational::from_int(2000));

        assert_eq!(cost1(Rational::new(1, 10), 100, 0), Rational::zero());
        assert_eq!(cost1(Rational::one(), 1, 7), Rational::from_int(7));
    }

    #[test]
    fn cost2_bound_examples() {
        let p = paper_defaults();
        let per_k = cost2_bound(&p) / Rational::from_int(100);
        // M n / nu + F R + tau n = 100 + 60 + 20.
        assert_eq!(per_k, Rational::from_int(180));

        let no_search = CostModelParams {
            search_rounds: 0,
            ..paper_defaults()
        };
        let per_k = cost2_bound(&no_search) / Rational::from_int(100);
        assert_eq!(per_k, Rational::from_int(120));

        let one_update = CostModelParams {
            update_period: 200,
            ..paper_defaults()
        };
        // nu = n: update term collapses to K * M.
        let per_k = cost2_bound(&one_update) / Rational::from_int(100);
        assert_eq!(per_k, Rational::from_int(5 + 60 + 20));
    }

    #[test]
    fn savings_examples() {
        let (delta, percent) = savings_delta(&paper_defaults());
        assert_eq!(delta, Rational::from_int(182_000));
        assert_eq!(percent, Rational::new(91, 100));

        // Degenerate protocol parameters that emulate greedy search cost
        // at least as much as greedy itself.
        let greedy_like = CostModelParams {
            helper_capacity: 99,
            replace_count: 99,
            search_rounds: 200,
            update_period: 1,
            ..paper_defaults()
        };
        let (delta, _) = savings_delta(&greedy_like);
        assert!(delta <= Rational::zero());

        let empty = CostModelParams {
            total_rounds: 0,
            ..paper_defaults()
        };
        let (_, percent) = savings_delta(&empty);
        assert_eq!(percent, Rational::zero());
    }

    #[test]
    fn nu_sweep_fractions_are_exact_rationals() {
        let base = paper_defaults();
        assert_eq!(nu_sweep_cost_fraction(&base, 1), Rational::one());
        assert_eq!(nu_sweep_cost_fraction(&base, 5), Rational::new(7, 27));
        assert_eq!(nu_sweep_cost_fraction(&base, 10), Rational::new(1, 6));
        assert_eq!(nu_sweep_cost_fraction(&base, 15), Rational::new(11, 81));
        assert_eq!(nu_sweep_cost_fraction(&base, 20), Rational::new(13, 108));
    }

    #[test]
    fn tau_sweep_fractions_are_exact_rationals() {
        let base = paper_defaults();
        assert_eq!(
            tau_sweep_cost_fraction(&base, Rational::one()),
            Rational::one()
        );
        assert_eq!(
            tau_sweep_cost_fraction(&base, Rational::new(1, 20)),
            Rational::new(1160, 20160)
        );
        assert_eq!(
            tau_sweep_cost_fraction(&base, Rational::new(1, 10)),
            Rational::new(2160, 20160)
        );
    }

    #[test]
    fn f_sweep_fraction_normalizes_to_reference() {
        let base = paper_defaults();
        assert_eq!(f_sweep_cost_fraction(&base, 200, 200), Rational::one());
        assert!(f_sweep_cost_fraction(&base, 30, 200) < Rational::one());
        assert!(f_sweep_cost_fraction(&base, 60, 200) > f_sweep_cost_fraction(&base, 30, 200));
    }

    #[test]
    fn ledger_counters_and_per_round_sums() {
        let mut ledger = CostLedger::new();
        ledger.record_upload(1);
        ledger.record_download(1);
        ledger.record_fill_download(2);
        ledger.record_download(3);
        assert_eq!(ledger.uploads(), 1);
        assert_eq!(ledger.downloads(), 3);
        assert_eq!(ledger.fill_downloads(), 1);
        assert_eq!(ledger.total(), 4);
        ledger.validate().unwrap();

        let rounds = ledger.per_round();
        assert_eq!(rounds[1].uploads, 1);
        assert_eq!(rounds[1].downloads, 1);
        assert_eq!(rounds[2].downloads, 1);
        assert_eq!(rounds[3].downloads, 1);
    }
}
