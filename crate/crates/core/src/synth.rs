//! Trajectory corpora sampled from known Markov chains, whose entropy rate
//! and Bayes-optimal next-step accuracy are computable exactly.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{TrajectorySequence, Vocab};
use crate::rng::RngState;

const ROW_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-12;
const MAX_POWER_ITERS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    pub states: usize,
    pub init: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    /// `states × symbols`; absent means each state emits itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emissions: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

fn check_distribution(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::config(format!("{what} has {} entries, expected {len}", row.len())));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::config(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::config(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl MarkovChainSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MarkovChainSpec =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid chain spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::config("chain needs at least one state"));
        }
        check_distribution(&self.init, self.states, "initial distribution")?;
        if self.transitions.len() != self.states {
            return Err(Error::config(format!(
                "transition matrix has {} rows, expected {}",
                self.transitions.len(),
                self.states
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            check_distribution(row, self.states, &format!("transition row {}", i + 1))?;
        }
        if let Some(em) = &self.emissions {
            if em.len() != self.states {
                return Err(Error::config("emission matrix needs one row per state"));
            }
            let symbols = em[0].len();
            if symbols == 0 {
                return Err(Error::config("emission matrix has no symbols"));
            }
            for (i, row) in em.iter().enumerate() {
                check_distribution(row, symbols, &format!("emission row {}", i + 1))?;
            }
        }
        Ok(())
    }

    /// Number of distinct output tokens.
    pub fn symbols(&self) -> usize {
        self.emissions.as_ref().map_or(self.states, |e| e[0].len())
    }

    fn has_identity_emission(&self) -> bool {
        match &self.emissions {
            None => true,
            Some(e) => {
                e.len() == e[0].len()
                    && e.iter().enumerate().all(|(i, r)| r.iter().enumerate().all(|(j, &p)| p == if i == j { 1.0 } else { 0.0 }))
            }
        }
    }

    /// A chain where each state moves to its own successor with probability
    /// `main` and spreads the rest randomly over the other states. Every
    /// row's largest entry is `main` whenever `main > 1 − main`.
    pub fn dominant_successor(states: usize, main: f64, seed: u64) -> Result<Self> {
        if states < 2 || !(0.0..=1.0).contains(&main) {
            return Err(Error::config("need at least two states and 0 <= main <= 1"));
        }
        let mut rng = RngState::new(seed).derive_str("dominant-successor");
        // A random cyclic order keeps the chain irreducible.
        let mut cycle: Vec<usize> = (0..states).collect();
        rng.shuffle(&mut cycle);
        let mut successor = vec![0; states];
        for k in 0..states {
            successor[cycle[k]] = cycle[(k + 1) % states];
        }
        let transitions = (0..states)
            .map(|s| {
                let weights: Vec<f64> = (0..states)
                    .map(|j| if j == successor[s] { 0.0 } else { rng.next_f64() })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut row: Vec<f64> = weights.iter().map(|w| (1.0 - main) * w / total).collect();
                row[successor[s]] = main;
                // Absorb rounding so the row sums to 1 within tolerance.
                let drift = 1.0 - row.iter().sum::<f64>();
                row[successor[s]] += drift;
                row
            })
            .collect();
        let spec = MarkovChainSpec {
            states,
            init: vec![1.0 / states as f64; states],
            transitions,
            emissions: None,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// States (1-based) not mutually reachable with state 1.
    fn unreachable(&self) -> Vec<usize> {
        let n = self.states;
        let walk = |forward: bool| {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(s) = queue.pop_front() {
                for t in 0..n {
                    let p = if forward { self.transitions[s][t] } else { self.transitions[t][s] };
                    if p > 0.0 && !seen[t] {
                        seen[t] = true;
                        queue.push_back(t);
                    }
                }
            }
            seen
        };
        let (fw, bw) = (walk(true), walk(false));
        (0..n).filter(|&s| !(fw[s] && bw[s])).map(|s| s + 1).collect()
    }

    /// Stationary distribution by power iteration on the lazy chain
    /// `(P + I)/2`, which has the same fixed point and no periodicity.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let bad = self.unreachable();
        if !bad.is_empty() {
            return Err(Error::Reducible { states: bad });
        }
        let n = self.states;
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..MAX_POWER_ITERS {
            next.iter_mut().for_each(|v| *v = 0.0);
            for (s, row) in self.transitions.iter().enumerate() {
                for (t, &p) in row.iter().enumerate() {
                    next[t] += pi[s] * p;
                }
            }
            let mut diff = 0.0;
            for (a, b) in pi.iter_mut().zip(&next) {
                let lazy = 0.5 * (*a + b);
                diff += (lazy - *a).abs();
                *a = lazy;
            }
            if diff < STATIONARY_TOL {
                let z: f64 = pi.iter().sum();
                return Ok(pi.iter().map(|p| p / z).collect());
            }
        }
        Err(Error::Domain {
            op: "stationary",
            message: "power iteration did not converge".into(),
        })
    }

    fn require_plain(&self, op: &'static str) -> Result<()> {
        if self.has_identity_emission() {
            Ok(())
        } else {
            Err(Error::Domain {
                op,
                message: "only defined for chains with identity emission".into(),
            })
        }
    }

    /// `−Σ_s π(s) Σ_t P(s,t) ln P(s,t)` in nats per step.
    pub fn entropy_rate(&self) -> Result<f64> {
        self.require_plain("entropy_rate")?;
        let pi = self.stationary()?;
        Ok(-pi
            .iter()
            .zip(&self.transitions)
            .map(|(w, row)| w * row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>())
    }

    /// Expected accuracy of predicting each row's most likely successor.
    pub fn oracle_accuracy(&self) -> Result<f64> {
        self.require_plain("oracle_accuracy")?;
        let pi = self.stationary()?;
        Ok(pi
            .iter()
            .zip(&self.transitions)
            .map(|(w, row)| w * row.iter().copied().fold(0.0, f64::max))
            .sum())
    }

    /// Token (1-based) of the most likely initial state, lowest on ties.
    pub fn homepage_token(&self) -> usize {
        let max = self.init.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        1 + self.init.iter().position(|&p| p == max).unwrap()
    }

    /// Vocabulary `s1..sN` over the emitted symbols.
    pub fn vocab(&self) -> Vocab {
        let names = (1..=self.symbols()).map(|i| format!("s{i}")).collect();
        let home = if self.emissions.is_some() { 1 } else { self.homepage_token() };
        Vocab::from_names(names, home).expect("valid synthetic vocabulary")
    }

    /// `n` sequences of `len` emitted tokens (IDs from 1), each drawn from
    /// its own stream derived from the spec seed and the sequence index,
    /// padded with 0 to `max_seq_len`.
    pub fn generate(&self, n: usize, len: usize, max_seq_len: usize) -> Result<Vec<TrajectorySequence>> {
        self.validate()?;
        if len == 0 || len > max_seq_len {
            return Err(Error::config(format!("sequence length {len} must be in 1..={max_seq_len}")));
        }
        let root = RngState::new(self.seed).derive_str("generate");
        Ok((0..n)
            .map(|i| {
                let mut rng = root.derive(i as u64);
                let mut tokens = Vec::with_capacity(max_seq_len);
                let mut state = rng.categorical(&self.init);
                for step in 0..len {
                    if step > 0 {
                        state = rng.categorical(&self.transitions[state]);
                    }
                    let symbol = match &self.emissions {
                        Some(e) => rng.categorical(&e[state]),
                        None => state,
                    };
                    tokens.push(symbol + 1);
                }
                tokens.resize(max_seq_len, 0);
                TrajectorySequence {
                    user: format!("synth-{i:06}"),
                    tokens,
                }
            })
            .collect())
    }
}
