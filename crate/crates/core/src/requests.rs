//! Deletion-request streams over training positions.
//!
//! Positions `1..=N` enumerate the live ids of a plan in
//! `(shard, slice, position)` order, so small positions sit in early slices
//! of early shards. A Pareto draw `x >= m` is mapped onto a position by
//! linear scaling against the 99.9th percentile `X_cap`:
//! `p = clamp(ceil((x - m) / (X_cap - m) * N), 1, N)`. Inverse-Pareto uses
//! the mirrored position `N + 1 - p` from the same draw.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::data::ExampleId;
use crate::partition::PartitionPlan;
use crate::seed::SeedKey;

pub const DEFAULT_PARETO_M: f64 = 1.0;
pub const DEFAULT_PARETO_A: f64 = 1.16;
/// Quantile used as the top of the position scale.
pub const CAP_QUANTILE: f64 = 0.999;

#[derive(Debug, Error, PartialEq)]
pub enum RequestError {
    #[error("quantile argument {0} outside [0, 1)")]
    BadQuantile(f64),
    #[error("pareto parameters must be positive (m={m}, a={a})")]
    BadParameters { m: f64, a: f64 },
    #[error("{requested} requests exceed the {live} live examples")]
    TooMany { requested: usize, live: usize },
    #[error("gave up after {attempts} draws with {found} of {requested} distinct ids")]
    Exhausted { attempts: u64, found: usize, requested: usize },
    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),
    #[error("request file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequestDistribution {
    Uniform,
    Pareto { m: f64, a: f64 },
    InversePareto { m: f64, a: f64 },
}

impl RequestDistribution {
    pub fn pareto() -> Self {
        RequestDistribution::Pareto { m: DEFAULT_PARETO_M, a: DEFAULT_PARETO_A }
    }

    pub fn inverse_pareto() -> Self {
        RequestDistribution::InversePareto { m: DEFAULT_PARETO_M, a: DEFAULT_PARETO_A }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RequestDistribution::Uniform => "uniform",
            RequestDistribution::Pareto { .. } => "pareto",
            RequestDistribution::InversePareto { .. } => "inverse-pareto",
        }
    }

    /// `uniform`, `pareto` or `inverse-pareto`, with the given shape parameters.
    pub fn parse(name: &str, m: f64, a: f64) -> Result<Self, RequestError> {
        let d = match name {
            "uniform" => RequestDistribution::Uniform,
            "pareto" => RequestDistribution::Pareto { m, a },
            "inverse-pareto" | "inverse_pareto" | "inverse" => RequestDistribution::InversePareto { m, a },
            other => return Err(RequestError::UnknownDistribution(other.to_string())),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        match *self {
            RequestDistribution::Uniform => Ok(()),
            RequestDistribution::Pareto { m, a } | RequestDistribution::InversePareto { m, a } => {
                if m > 0.0 && a > 0.0 && m.is_finite() && a.is_finite() {
                    Ok(())
                } else {
                    Err(RequestError::BadParameters { m, a })
                }
            }
        }
    }
}

impl fmt::Display for RequestDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestDistribution::Uniform => write!(f, "uniform"),
            RequestDistribution::Pareto { m, a } => write!(f, "pareto m={m} a={a}"),
            RequestDistribution::InversePareto { m, a } => write!(f, "inverse-pareto m={m} a={a}"),
        }
    }
}

/// Inverse CDF of Pareto(m, a): `m / (1 - u)^(1/a)`.
pub fn pareto_quantile(u: f64, m: f64, a: f64) -> Result<f64, RequestError> {
    if !(0.0..1.0).contains(&u) {
        return Err(RequestError::BadQuantile(u));
    }
    if !(m > 0.0 && a > 0.0) {
        return Err(RequestError::BadParameters { m, a });
    }
    Ok(m / (1.0 - u).powf(1.0 / a))
}

/// Map a Pareto draw onto a 1-based position in `1..=n`.
pub fn position_of(x: f64, n: usize, m: f64, a: f64) -> usize {
    let n = n.max(1);
    let cap = m / (1.0 - CAP_QUANTILE).powf(1.0 / a);
    let scaled = ((x - m) / (cap - m) * n as f64).ceil();
    if scaled.is_nan() || scaled < 1.0 {
        1
    } else if scaled >= n as f64 {
        n
    } else {
        scaled as usize
    }
}

/// Position for one uniform variate `u` in `[0, 1)`.
fn draw_position(dist: &RequestDistribution, u: f64, n: usize) -> usize {
    match *dist {
        RequestDistribution::Uniform => ((u * n as f64) as usize + 1).min(n),
        RequestDistribution::Pareto { m, a } => position_of(m / (1.0 - u).powf(1.0 / a), n, m, a),
        RequestDistribution::InversePareto { m, a } => n + 1 - position_of(m / (1.0 - u).powf(1.0 / a), n, m, a),
    }
}

fn request_key(seed: u64) -> SeedKey {
    SeedKey::new(seed).tag("requests")
}

/// `count` raw positions drawn with replacement, before any de-duplication.
/// These are exactly the candidates [`sample_requests`] examines, in order.
pub fn draw_positions(dist: &RequestDistribution, n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = request_key(seed).rng();
    (0..count).map(|_| draw_position(dist, rng.next_f64(), n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestStream {
    pub ids: Vec<ExampleId>,
    pub seed: u64,
    pub distribution: RequestDistribution,
}

/// Sample `n` distinct live ids. Positions are drawn i.i.d.; a draw that hits
/// an already-chosen id is discarded and redrawn.
pub fn sample_requests(
    plan: &PartitionPlan,
    dist: RequestDistribution,
    n: usize,
    seed: u64,
) -> Result<RequestStream, RequestError> {
    dist.validate()?;
    let live = plan.ordered_ids();
    if n > live.len() {
        return Err(RequestError::TooMany { requested: n, live: live.len() });
    }
    let max_attempts = (n as u64).saturating_mul(10_000).max(1_000_000);
    let mut rng = request_key(seed).rng();
    let mut chosen = HashSet::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while ids.len() < n {
        if attempts == max_attempts {
            return Err(RequestError::Exhausted { attempts, found: ids.len(), requested: n });
        }
        attempts += 1;
        let id = live[draw_position(&dist, rng.next_f64(), live.len()) - 1];
        if chosen.insert(id) {
            ids.push(id);
        }
    }
    Ok(RequestStream { ids, seed, distribution: dist })
}

impl RequestStream {
    /// Header comment line, then one id per line.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (m, a) = match self.distribution {
            RequestDistribution::Uniform => (DEFAULT_PARETO_M, DEFAULT_PARETO_A),
            RequestDistribution::Pareto { m, a } | RequestDistribution::InversePareto { m, a } => (m, a),
        };
        writeln!(
            w,
            "# distribution={} m={m} a={a} seed={} n={}",
            self.distribution.name(),
            self.seed,
            self.ids.len()
        )?;
        for id in &self.ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, RequestError> {
        let mut ids = Vec::new();
        let mut header: Option<(String, f64, f64, u64)> = None;
        for (n, line) in r.lines().enumerate() {
            let err = |msg: String| RequestError::Parse { line: n + 1, msg };
            let line = line.map_err(|e| err(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut name = None;
                let (mut m, mut a, mut seed) = (DEFAULT_PARETO_M, DEFAULT_PARETO_A, 0);
                for kv in rest.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    match k {
                        "distribution" => name = Some(v.to_string()),
                        "m" => m = v.parse().map_err(|_| err(format!("bad m `{v}`")))?,
                        "a" => a = v.parse().map_err(|_| err(format!("bad a `{v}`")))?,
                        "seed" => seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?,
                        _ => {}
                    }
                }
                if let Some(name) = name {
                    header = Some((name, m, a, seed));
                }
                continue;
            }
            ids.push(line.parse().map_err(|_| err(format!("bad id `{line}`")))?);
        }
        let (name, m, a, seed) = header.unwrap_or_else(|| ("uniform".into(), DEFAULT_PARETO_M, DEFAULT_PARETO_A, 0));
        Ok(RequestStream { ids, seed, distribution: RequestDistribution::parse(&name, m, a)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{make_plan, PartitionStrategy};

    fn plan(n: u64) -> PartitionPlan {
        make_plan(&(0..n).collect::<Vec<_>>(), 5, 4, &PartitionStrategy::UniformRandom, 1).unwrap()
    }

    #[test]
    fn quantile_values() {
        assert_eq!(pareto_quantile(0.0, 1.0, 1.16).unwrap(), 1.0);
        assert_eq!(pareto_quantile(0.0, 2.5, 3.0).unwrap(), 2.5);
        // 2^(1/1.16), 100^(1/1.16), 1000^(1/1.16) evaluated with mpmath at 30 digits.
        assert!((pareto_quantile(0.5, 1.0, 1.16).unwrap() - 1.817_643_120_075_723).abs() < 1e-12);
        assert!((pareto_quantile(0.99, 1.0, 1.16).unwrap() - 52.983_169_062_837_09).abs() < 1e-9);
        assert!((pareto_quantile(CAP_QUANTILE, 1.0, 1.16).unwrap() - 385.662_042_116_347_2).abs() < 1e-8);
        assert_eq!(pareto_quantile(1.0, 1.0, 1.16), Err(RequestError::BadQuantile(1.0)));
        assert_eq!(pareto_quantile(-0.1, 1.0, 1.16), Err(RequestError::BadQuantile(-0.1)));
        assert!(matches!(pareto_quantile(0.5, 0.0, 1.16), Err(RequestError::BadParameters { .. })));
    }

    #[test]
    fn positions() {
        let (m, a) = (1.0, 1.16);
        let cap = pareto_quantile(CAP_QUANTILE, m, a).unwrap();
        for n in [1, 2, 10, 10_000] {
            assert_eq!(position_of(m, n, m, a), 1);
            assert_eq!(position_of(cap, n, m, a), n);
            assert_eq!(position_of(cap * 10.0, n, m, a), n);
        }
        assert_eq!(position_of(17.0, 1, m, a), 1);
        let mid = position_of(1.0 + (cap - 1.0) / 2.0, 100, m, a);
        assert_eq!(mid, 50);
    }

    #[test]
    fn uniform_exhaustion_is_a_permutation() {
        let p = plan(40);
        let s = sample_requests(&p, RequestDistribution::Uniform, 40, 3).unwrap();
        let mut got = s.ids.clone();
        got.sort_unstable();
        assert_eq!(got, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_requests() {
        assert_eq!(
            sample_requests(&plan(40), RequestDistribution::Uniform, 41, 0),
            Err(RequestError::TooMany { requested: 41, live: 40 })
        );
    }

    #[test]
    fn determinism_and_distinctness() {
        let p = plan(200);
        for d in [RequestDistribution::Uniform, RequestDistribution::pareto(), RequestDistribution::inverse_pareto()] {
            let a = sample_requests(&p, d, 30, 9).unwrap();
            assert_eq!(a, sample_requests(&p, d, 30, 9).unwrap());
            let set: HashSet<_> = a.ids.iter().collect();
            assert_eq!(set.len(), 30);
        }
    }

    #[test]
    fn mirror_identity() {
        let n = 997;
        let p = draw_positions(&RequestDistribution::pareto(), n, 5000, 21);
        let q = draw_positions(&RequestDistribution::inverse_pareto(), n, 5000, 21);
        for (x, y) in p.iter().zip(&q) {
            assert_eq!(*y, n + 1 - x);
        }
    }

    #[test]
    fn stream_file_round_trip() {
        let p = plan(100);
        let s = sample_requests(&p, RequestDistribution::InversePareto { m: 2.0, a: 1.5 }, 7, 4).unwrap();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# distribution=inverse-pareto m=2 a=1.5 seed=4 n=7\n"));
        assert_eq!(RequestStream::read(&buf[..]).unwrap(), s);
    }

    #[test]
    fn parse_names() {
        assert_eq!(RequestDistribution::parse("uniform", 1.0, 1.0), Ok(RequestDistribution::Uniform));
        assert!(RequestDistribution::parse("zipf", 1.0, 1.0).is_err());
        assert!(RequestDistribution::parse("pareto", -1.0, 1.0).is_err());
    }
}
