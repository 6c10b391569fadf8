//! Weibull-timed fault injection and MTTI accounting.
//!
//! Kill times are cumulative sums of i.i.d. Weibull inter-arrival times on the
//! useful-time clock; the transport fires each kill once useful time reaches
//! it and picks the victim uniformly among live ranks.

use std::fmt::Write as _;
use std::str::FromStr;

use num_traits::Float;
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{OpenClosed01, Weibull};
use thiserror::Error;

use crate::layout::Placement;
use crate::transport::{KillTrigger, PlannedKill, RunReport, Victim};
use crate::{PhysRank, Time};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("Weibull shape and scale must be strictly positive")]
    InvalidParams,
    #[error("no run records")]
    NoRecords,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullParams<F> {
    pub shape: F,
    pub scale: F,
    pub seed: u64,
}

impl<F: Float> WeibullParams<F> {
    pub fn new(shape: F, scale: F, seed: u64) -> Result<Self, FaultError> {
        if shape > F::zero() && scale > F::zero() {
            Ok(Self { shape, scale, seed })
        } else {
            Err(FaultError::InvalidParams)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Cumulative kill times below `horizon`.
pub fn sample_schedule<F>(params: &WeibullParams<F>, horizon: F) -> Vec<F>
where
    F: Float,
    OpenClosed01: Distribution<F>,
{
    assert!(horizon > F::zero(), "horizon must be positive");
    let dist = Weibull::new(params.scale, params.shape).expect("validated parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut t = F::zero();
    let mut out = Vec::new();
    loop {
        t = t + dist.sample(&mut rng);
        if t >= horizon {
            return out;
        }
        out.push(t);
    }
}

/// Uniform pick among live ranks.
pub fn pick_victim<R: Rng>(rng: &mut R, live: &[PhysRank]) -> PhysRank {
    assert!(!live.is_empty(), "no live rank to kill");
    live[rng.gen_range(0..live.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledKill {
    /// Useful time at which the kill fires.
    pub time: Time,
    /// Fixed victim, or `None` for a uniform pick among live ranks.
    pub victim: Option<PhysRank>,
}

/// A replayable injection campaign.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultSchedule {
    pub kills: Vec<ScheduledKill>,
}

impl FaultSchedule {
    pub fn weibull<F>(params: &WeibullParams<F>, horizon: F) -> Self
    where
        F: Float,
        OpenClosed01: Distribution<F>,
    {
        let kills = sample_schedule(params, horizon)
            .into_iter()
            .map(|t| ScheduledKill {
                time: t.ceil().to_u64().unwrap_or(Time::MAX).max(1),
                victim: None,
            })
            .collect();
        Self { kills }
    }

    pub fn plan(&self) -> Vec<PlannedKill> {
        self.kills
            .iter()
            .map(|k| PlannedKill {
                trigger: KillTrigger::UsefulTime(k.time),
                victim: k.victim.map_or(Victim::Uniform, Victim::Rank),
            })
            .collect()
    }

    /// One `time victim` line per kill; `*` marks a uniform victim.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for k in &self.kills {
            match k.victim {
                Some(v) => writeln!(s, "{} {}", k.time, v),
                None => writeln!(s, "{} *", k.time),
            }
            .expect("writing to a string");
        }
        s
    }
}

impl FromStr for FaultSchedule {
    type Err = FaultError;

    fn from_str(text: &str) -> Result<Self, FaultError> {
        let mut kills = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| FaultError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let time = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err("bad kill time"))?;
            let victim = match parts.next() {
                None | Some("*") => None,
                Some(v) => Some(v.parse().map_err(|_| err("bad victim"))?),
            };
            if parts.next().is_some() {
                return Err(err("trailing fields"));
            }
            kills.push(ScheduledKill { time, victim });
        }
        kills.sort_by_key(|k| k.time);
        Ok(Self { kills })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillRecord {
    pub time: Time,
    pub rank: PhysRank,
    /// The victim's user rank still had another live incarnation.
    pub had_replica: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    /// Useful time at interruption, or of the whole run when it completed.
    pub useful_time: Time,
    pub completed: bool,
    pub kills: Vec<KillRecord>,
}

impl RunRecord {
    pub fn from_report<T>(report: &RunReport<T>, initial: &Placement) -> Self {
        let mut killed = Vec::new();
        let kills = report
            .kills
            .iter()
            .map(|k| {
                let user = initial.caller(k.victim).expect("victim placed").user;
                let had_replica = initial
                    .incarnations(user)
                    .iter()
                    .any(|p| *p != k.victim && !killed.contains(p));
                killed.push(k.victim);
                KillRecord {
                    time: k.time,
                    rank: k.victim,
                    had_replica,
                }
            })
            .collect();
        Self {
            useful_time: report.interruption_useful_time().unwrap_or(report.useful_time),
            completed: report.interrupted.is_none(),
            kills,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MttiEstimate<F> {
    pub mean: F,
    /// Standard error of the mean.
    pub std_err: F,
    pub runs: usize,
    pub interrupted: usize,
    /// Some runs completed, so the mean underestimates the true MTTI.
    pub lower_bound: bool,
}

pub fn mtti<F: Float>(records: &[RunRecord]) -> Result<MttiEstimate<F>, FaultError> {
    if records.is_empty() {
        return Err(FaultError::NoRecords);
    }
    let n = F::from(records.len()).expect("count fits");
    let xs: Vec<F> = records
        .iter()
        .map(|r| F::from(r.useful_time).expect("time fits"))
        .collect();
    let mean = xs.iter().fold(F::zero(), |a, &x| a + x) / n;
    let std_err = if records.len() > 1 {
        let var = xs.iter().fold(F::zero(), |a, &x| a + (x - mean) * (x - mean)) / (n - F::one());
        (var / n).sqrt()
    } else {
        F::zero()
    };
    let interrupted = records.iter().filter(|r| !r.completed).count();
    Ok(MttiEstimate {
        mean,
        std_err,
        runs: records.len(),
        interrupted,
        lower_bound: interrupted < records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::KillEvent;
    use crate::WorldLayout;
    use statrs::function::gamma::gamma;

    fn mean_gap(k: f64, lambda: f64) -> f64 {
        let dist = Weibull::new(lambda, k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        (0..n).map(|_| dist.sample(&mut rng)).sum::<f64>() / n as f64
    }

    #[test]
    fn exponential_special_case() {
        let m = mean_gap(1.0, 50.0);
        assert!((m - 50.0).abs() / 50.0 < 0.02, "{m}");
    }

    #[test]
    fn schedule_gaps_match_gamma_mean() {
        let p = WeibullParams::new(0.7, 100.0, 5).unwrap();
        let t = sample_schedule(&p, 100.0 * 100_000.0);
        let m = t.last().unwrap() / t.len() as f64;
        let want = 100.0 * gamma(1.0 + 1.0 / 0.7);
        assert!((m - want).abs() / want < 0.02, "{m} vs {want}");
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn schedule_is_deterministic() {
        let p = WeibullParams::new(0.7f32, 10.0, 9).unwrap();
        assert_eq!(sample_schedule(&p, 1000.0), sample_schedule(&p, 1000.0));
        assert_ne!(sample_schedule(&p, 1000.0), sample_schedule(&p.with_seed(10), 1000.0));
    }

    #[test]
    fn invalid_params_rejected() {
        assert_eq!(WeibullParams::new(0.0, 1.0, 0), Err(FaultError::InvalidParams));
        assert_eq!(WeibullParams::new(1.0, -1.0, 0), Err(FaultError::InvalidParams));
    }

    #[test]
    fn single_live_rank_is_the_victim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pick_victim(&mut rng, &[4]), 4);
    }

    #[test]
    fn victims_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let live = [0, 2, 3, 5, 7, 8];
        let n = 100_000;
        let mut counts = [0f64; 9];
        for _ in 0..n {
            counts[pick_victim(&mut rng, &live)] += 1.0;
        }
        let e = n as f64 / live.len() as f64;
        let chi2: f64 = live.iter().map(|&v| (counts[v] - e).powi(2) / e).sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new((live.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    fn rec(t: Time, completed: bool) -> RunRecord {
        RunRecord {
            useful_time: t,
            completed,
            kills: vec![],
        }
    }

    #[test]
    fn mtti_arithmetic_and_flags() {
        let m: MttiEstimate<f64> = mtti(&[rec(10, false), rec(20, false)]).unwrap();
        assert_eq!(m.mean, 15.0);
        assert!(!m.lower_bound);
        let m: MttiEstimate<f64> = mtti(&[rec(10, true), rec(30, true)]).unwrap();
        assert!(m.lower_bound);
        assert_eq!(m.interrupted, 0);
        let m: MttiEstimate<f32> = mtti(&[rec(10, false), rec(30, true)]).unwrap();
        assert_eq!((m.mean, m.interrupted, m.lower_bound), (20.0, 1, true));
        assert_eq!(mtti::<f64>(&[]), Err(FaultError::NoRecords));
    }

    #[test]
    fn schedule_text_roundtrip() {
        let s = FaultSchedule {
            kills: vec![
                ScheduledKill { time: 5, victim: Some(3) },
                ScheduledKill { time: 9, victim: None },
            ],
        };
        assert_eq!(s.dump(), "5 3\n9 *\n");
        assert_eq!(s.dump().parse::<FaultSchedule>().unwrap(), s);
        assert!("x 1".parse::<FaultSchedule>().is_err());
        let plan = s.plan();
        assert_eq!(plan[1].victim, Victim::Uniform);
        assert_eq!(plan[0].trigger, KillTrigger::UsefulTime(5));
    }

    #[test]
    fn record_flags_replicated_kills() {
        let place = Placement::initial(WorldLayout::build(2, 1.0).unwrap());
        let report = RunReport::<()> {
            outputs: vec![],
            interrupted: Some(crate::Interrupted { user: 0, dead: 2 }),
            kills: vec![
                KillEvent { time: 4, useful: 3, victim: 0 },
                KillEvent { time: 9, useful: 7, victim: 2 },
            ],
            end_time: 12,
            handler_time: 3,
            useful_time: 9,
            steps: 12,
            schedule_digest: 0,
        };
        let r = RunRecord::from_report(&report, &place);
        assert_eq!(r.useful_time, 7);
        assert!(!r.completed);
        assert_eq!(r.kills.iter().map(|k| k.had_replica).collect::<Vec<_>>(), vec![true, false]);
    }
}
