//! Analytic vs central finite-difference gradient comparison for every layer
//! and loss kind on randomly drawn configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{residual_block, scse, ConvVars, ResidualVars, ScseVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::exec;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub const KINDS: &[&str] = &[
    "conv1d",
    "dense",
    "selu",
    "sigmoid",
    "relu",
    "softmax",
    "gap",
    "scse",
    "residual-scse-block",
    "loss-bce",
    "loss-mse",
    "loss-cosine",
    "activity-l2",
];

#[derive(Debug, Clone)]
pub struct KindResult {
    pub kind: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
    pub worst_config: String,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub kinds: Vec<KindResult>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.kinds.iter().map(|k| k.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in &self.kinds {
            out.push_str(&format!(
                "{:<22} configs={:<4} max_rel_error={:.3e} worst=[{}]\n",
                k.kind, k.configs, k.max_rel_error, k.worst_config
            ));
        }
        out
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync;

/// Largest relative error over every element of every input.
pub fn check_case(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Normal draws pushed at least `gap` away from zero (kink of selu/relu).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = normal(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// `Σ y ⊙ r` — a fixed random linear functional that turns any output
/// into a scalar loss.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn scse_shapes(c: usize, r: usize) -> Vec<Vec<usize>> {
    let h = c / r;
    vec![vec![c, h], vec![h], vec![h, c], vec![c], vec![1, c, 1], vec![1]]
}

fn scse_from(v: &[Var]) -> ScseVars {
    ScseVars {
        sq1_w: v[0],
        sq1_b: v[1],
        sq2_w: v[2],
        sq2_b: v[3],
        sp_w: v[4],
        sp_b: v[5],
    }
}

/// One random configuration of `kind`; returns (label, max relative error).
pub fn check_kind(kind: &str, seed: u64) -> Result<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.random_range(1..=9usize);
    match kind {
        "conv1d" => {
            let (ci, co) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
            let k = [1usize, 3, 5][rng.random_range(0..3)];
            let d = rng.random_range(1..=3usize);
            let inputs = vec![
                normal(&mut rng, &[t_len, ci], 1.0),
                normal(&mut rng, &[k, ci, co], 0.5),
                normal(&mut rng, &[co], 0.5),
            ];
            let r = normal(&mut rng, &[t_len, co], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let y = tape.conv1d(v[0], v[1], v[2], d)?;
                project(tape, y, &r)
            })?;
            Ok((format!("T={t_len} Cin={ci} Cout={co} K={k} d={d}"), err))
        }
        "dense" => {
            let (n, m) = (rng.random_range(1..=6usize), rng.random_range(1..=5usize));
            let inputs = vec![
                normal(&mut rng, &[n], 1.0),
                normal(&mut rng, &[n, m], 0.5),
                normal(&mut rng, &[m], 0.5),
            ];
            let r = normal(&mut rng, &[m], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let y = tape.dense(v[0], v[1], v[2])?;
                project(tape, y, &r)
            })?;
            Ok((format!("n={n} m={m}"), err))
        }
        "selu" | "sigmoid" | "relu" => {
            let c = rng.random_range(1..=4usize);
            let inputs = vec![away_from_zero(&mut rng, &[t_len, c], 0.05)];
            let r = normal(&mut rng, &[t_len, c], 1.0);
            let which = kind.to_string();
            let err = check_case(&inputs, &move |tape, v| {
                let y = match which.as_str() {
                    "selu" => tape.selu(v[0]),
                    "sigmoid" => tape.sigmoid(v[0]),
                    _ => tape.relu(v[0]),
                };
                project(tape, y, &r)
            })?;
            Ok((format!("T={t_len} C={c}"), err))
        }
        "softmax" => {
            let n = rng.random_range(2..=6usize);
            let inputs = vec![normal(&mut rng, &[n], 1.5)];
            let r = normal(&mut rng, &[n], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let y = tape.softmax(v[0])?;
                project(tape, y, &r)
            })?;
            Ok((format!("n={n}"), err))
        }
        "gap" => {
            let c = rng.random_range(1..=5usize);
            let inputs = vec![normal(&mut rng, &[t_len, c], 1.0)];
            let r = normal(&mut rng, &[c], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let y = tape.gap(v[0])?;
                project(tape, y, &r)
            })?;
            Ok((format!("T={t_len} C={c}"), err))
        }
        "scse" => {
            let (c, r) = [(1usize, 1usize), (2, 1), (2, 2), (4, 2), (6, 3), (6, 2)]
                [rng.random_range(0..6)];
            let mut inputs = vec![normal(&mut rng, &[t_len, c], 1.0)];
            for s in scse_shapes(c, r) {
                inputs.push(normal(&mut rng, &s, 0.7));
            }
            let proj = normal(&mut rng, &[t_len, c], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let y = scse(tape, v[0], &scse_from(&v[1..7]))?;
                project(tape, y, &proj)
            })?;
            Ok((format!("T={t_len} C={c} r={r}"), err))
        }
        "residual-scse-block" => {
            let ci = rng.random_range(2..=4usize);
            let co = [2usize, 4][rng.random_range(0..2)];
            let k = [1usize, 3, 5][rng.random_range(0..3)];
            let d = rng.random_range(1..=2usize);
            let t_len = t_len.max(2);
            let mut inputs = vec![
                normal(&mut rng, &[t_len, ci], 1.0),
                normal(&mut rng, &[k, ci, co], 0.5),
                normal(&mut rng, &[co], 0.3),
            ];
            for s in scse_shapes(co, 2) {
                inputs.push(normal(&mut rng, &s, 0.7));
            }
            inputs.push(normal(&mut rng, &[k, co, co], 0.5));
            inputs.push(normal(&mut rng, &[co], 0.3));
            for s in scse_shapes(co, 2) {
                inputs.push(normal(&mut rng, &s, 0.7));
            }
            let has_proj = ci != co;
            if has_proj {
                inputs.push(normal(&mut rng, &[1, ci, co], 0.5));
                inputs.push(normal(&mut rng, &[co], 0.3));
            }
            let r = normal(&mut rng, &[t_len, co], 1.0);
            let err = check_case(&inputs, &move |tape, v| {
                let p = ResidualVars {
                    conv1: ConvVars { w: v[1], b: v[2] },
                    scse1: scse_from(&v[3..9]),
                    conv2: ConvVars { w: v[9], b: v[10] },
                    scse2: scse_from(&v[11..17]),
                    proj: has_proj.then(|| ConvVars { w: v[17], b: v[18] }),
                };
                let y = residual_block(tape, v[0], &p, d, &mut |_, _| {})?;
                project(tape, y, &r)
            })?;
            Ok((format!("T={t_len} Cin={ci} Cout={co} K={k} d={d}"), err))
        }
        "loss-bce" | "loss-mse" | "loss-cosine" => {
            let n = rng.random_range(1..=6usize);
            let weight = rng.random_range(0.2..3.0);
            let p = if kind == "loss-bce" {
                uniform(&mut rng, &[n], 0.05, 0.95)
            } else {
                away_from_zero(&mut rng, &[n], 0.1)
            };
            let t = uniform(&mut rng, &[n], 0.0, 1.0);
            let which = kind.to_string();
            let err = check_case(&[p], &move |tape, v| match which.as_str() {
                "loss-bce" => tape.bce(v[0], &t, weight),
                "loss-mse" => tape.mse(v[0], &t, weight),
                _ => tape.cosine(v[0], &t, weight),
            })?;
            Ok((format!("n={n} weight={weight:.3}"), err))
        }
        "activity-l2" => {
            let c = rng.random_range(1..=4usize);
            let coef = rng.random_range(0.1..2.0);
            let inputs = vec![normal(&mut rng, &[t_len, c], 1.0)];
            let err = check_case(&inputs, &move |tape, v| Ok(tape.mean_square(v[0], coef)))?;
            Ok((format!("T={t_len} C={c}"), err))
        }
        other => Err(crate::error::Error::invalid(format!(
            "unknown gradient-check kind `{other}`"
        ))),
    }
}

/// Runs `configs` random configurations for every kind in [`KINDS`].
pub fn run(configs: usize, base_seed: u64) -> Result<GradCheckReport> {
    let kinds = exec::map_indexed(KINDS.len(), exec::Execution::default(), |ki| {
        let kind = KINDS[ki];
        let mut worst = (String::new(), 0.0f64);
        for s in 0..configs {
            let seed = exec::derive_seed(base_seed, (ki * 10_000 + s) as u64);
            let (label, err) = check_kind(kind, seed)?;
            if err >= worst.1 {
                worst = (label, err);
            }
        }
        Ok(KindResult {
            kind,
            configs,
            max_rel_error: worst.1,
            worst_config: worst.0,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { kinds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_checks_out_on_a_few_seeds() {
        let report = run(3, 11).unwrap();
        assert_eq!(report.kinds.len(), KINDS.len());
        assert!(report.passes(1e-4), "{}", report.render());
    }

    #[test]
    fn square_matches_finite_differences() {
        let x = Tensor::vector(vec![0.4, -1.1]);
        let err = check_case(&[x], &|tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_gradients() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
