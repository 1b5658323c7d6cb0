//! Self-checks run by the `verify` command on the micro fixture.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{EventLabel, Instance};
use crate::distill::micro::{micro_distiller, micro_instances};
use crate::distill::{build_layer_map, distillation_term_value, Distiller, LossVars};
use crate::error::Result;
use crate::eval::{f1_score, mean, metrics, ConfusionMatrix, EvalMode};
use crate::model::Mode;
use crate::numerics::{grad_check, Parameter, Tape, Tensor, Var};
use crate::teachers::Modality;

pub const VERIFY_FILE: &str = "verify.txt";

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    /// A counting check: `violations` must be zero.
    fn count(name: &str, violations: usize, detail: impl Into<String>) -> Self {
        Self::within(name, violations as f64, 0.0, detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// One line per check: status, name, measured value, tolerance, detail.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<42} measured={:.3e} tolerance={:.1e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            );
        }
        out
    }
}

/// Runs every check. Only setup failures are errors; failed checks are
/// reported in the result.
pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    let mut checks = vec![primitive_grad_check(seed)?];
    checks.extend(loss_grad_checks(seed)?);
    checks.extend(layer_map_checks());
    checks.extend(loss_algebra_checks(seed)?);
    checks.extend(metric_checks(seed)?);
    Ok(VerifyReport { checks })
}

fn primitive_grad_check(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Parameter::new("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let b = Parameter::new("b", Tensor::uniform(&[4, 2], 1.0, &mut rng));
    let report = grad_check(&[&a, &b], |t| {
        let (x, y) = (t.param(&a), t.param(&b));
        let p = t.matmul(x, y)?;
        Ok(t.sum_all(p))
    })?;
    Ok(Check::within(
        "grad_check.matmul_sum",
        report.max_relative_error,
        1e-6,
        format!("{} elements", report.checked_elements),
    ))
}

fn loss_grad_checks(seed: u64) -> Result<Vec<Check>> {
    let d = micro_distiller(&Modality::ALL, seed)?;
    let data = micro_instances(2, seed.wrapping_add(1))?;
    let batch: Vec<&Instance> = data.iter().collect();
    let mut inputs: Vec<&Parameter> = d.trainable();
    for t in &d.teachers {
        inputs.extend(t.encoder.params());
    }
    type Term = (&'static str, fn(&LossVars) -> Var);
    let terms: [Term; 4] = [
        ("grad_check.hidden_loss", |v| v.l_hid),
        ("grad_check.distillation_loss", |v| v.l_dis),
        ("grad_check.task_loss", |v| v.l_task),
        ("grad_check.total_loss", |v| v.l_total),
    ];
    let mut checks = Vec::with_capacity(terms.len() + 1);
    for (name, pick) in terms {
        let report = grad_check(&inputs, |tape| {
            Ok(pick(&d.total_loss(tape, &batch, None, &mut Mode::Eval, None)?))
        })?;
        let worst = report.worst().map_or(String::new(), |p| format!(", worst {}", p.name));
        checks.push(Check::within(
            name,
            report.max_relative_error,
            GRAD_TOLERANCE,
            format!("{} elements{worst}", report.checked_elements),
        ));
    }
    checks.push(frozen_teacher_gradients(&d, &batch)?);
    Ok(checks)
}

fn frozen_teacher_gradients(d: &Distiller, batch: &[&Instance]) -> Result<Check> {
    let mut tape = Tape::new();
    let total = d.total_loss(&mut tape, batch, None, &mut Mode::Eval, None)?.l_total;
    tape.backward(total)?;
    let frozen: Vec<&Parameter> = d.teachers.iter().flat_map(|t| t.encoder.params()).collect();
    let leaked = frozen.iter().filter(|p| tape.param_grad(p).is_some()).count();
    Ok(Check::count(
        "frozen_teachers.no_gradient",
        leaked,
        format!("{} frozen teacher tensors", frozen.len()),
    ))
}

fn layer_map_checks() -> Vec<Check> {
    let mut expected: Vec<(usize, usize)> = (1..=8).map(|i| (i, i)).collect();
    expected.extend([(9, 8), (10, 8), (11, 8), (12, 8)]);
    let table_ok = build_layer_map(12, 8).is_ok_and(|m| m.pairs() == expected.as_slice());

    let mut violations = 0;
    let mut cases = 0;
    for k in 1..=24 {
        for m in 1..=k {
            cases += 1;
            let Ok(map) = build_layer_map(k, m) else {
                violations += 1;
                continue;
            };
            let count = |s: usize| map.pairs().iter().filter(|p| p.1 == s).count();
            let teachers_in_order = map.pairs().iter().enumerate().all(|(i, p)| p.0 == i + 1);
            if map.len() != k || count(m) != k - m + 1 || (1..m).any(|s| count(s) != 1) || !teachers_in_order {
                violations += 1;
            }
        }
    }
    let rejects = [(3, 5), (4, 0)]
        .iter()
        .filter(|&&(k, m)| build_layer_map(k, m).is_ok())
        .count();
    vec![
        Check::count(
            "layer_map.12_to_8_table",
            usize::from(!table_ok),
            "(1,1)..(8,8),(9..12,8)",
        ),
        Check::count(
            "layer_map.invariants",
            violations,
            format!("{cases} (K, M) pairs with K >= M"),
        ),
        Check::count("layer_map.rejects_invalid", rejects, "K < M and M = 0"),
    ]
}

fn loss_algebra_checks(seed: u64) -> Result<Vec<Check>> {
    let d = micro_distiller(&Modality::ALL, seed.wrapping_add(2))?;
    let data = micro_instances(16, seed.wrapping_add(3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for _ in 0..100 {
        let size = rng.random_range(1..=6);
        let batch: Vec<&Instance> = data.choose_multiple(&mut rng, size).collect();
        let mut tape = Tape::new();
        let b = d
            .total_loss(&mut tape, &batch, None, &mut Mode::Train(&mut rng), None)?
            .breakdown(&tape);
        worst = worst.max((b.l_total - (b.l_hid + b.l_dis + b.l_task)).abs());
        if !(b.l_hid >= 0.0 && b.l_dis >= 0.0 && b.l_task >= 0.0) {
            negative += 1;
        }
    }

    let ln4 = 4f64.ln();
    let uniform = distillation_term_value(&[0.0; 4], &[0.0; 4], 0)?;

    let mut monotone_violations = 0;
    for _ in 0..1000 {
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = rng.random_range(0..4);
        let z = (y + rng.random_range(1..4)) % 4;
        let ce = |c: usize| -log_softmax(&t)[c];
        let (a, b) = (distillation_term_value(&t, &s, y)?, distillation_term_value(&t, &s, z)?);
        let agrees = match ce(y).total_cmp(&ce(z)) {
            std::cmp::Ordering::Less => a > b,
            std::cmp::Ordering::Greater => a < b,
            std::cmp::Ordering::Equal => a == b,
        };
        monotone_violations += usize::from(!agrees);
    }

    Ok(vec![
        Check::within("loss_algebra.total_is_sum", worst, 0.0, "100 random train-mode batches"),
        Check::count(
            "loss_algebra.components_nonnegative",
            negative,
            "100 random train-mode batches",
        ),
        Check::within(
            "loss_algebra.uniform_closed_form",
            (uniform - ln4 / (1.0 + ln4)).abs(),
            1e-9,
            format!("value {uniform:.6}, ln4/(1+ln4)"),
        ),
        Check::count(
            "loss_algebra.monotone_in_teacher_error",
            monotone_violations,
            "1000 random (teacher, student, label) triples",
        ),
    ])
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn metric_checks(seed: u64) -> Result<Vec<Check>> {
    let f1_rows = [(0.740, 1.0, 0.851), (0.859, 0.421, 0.565)];
    let f1_err = f1_rows
        .iter()
        .map(|&(p, r, f)| (f1_score(p, r) - f).abs())
        .fold(0.0, f64::max);
    let macro_err = (mean(&[0.646, 0.408, 0.220, 0.705]) - 0.495).abs();

    let gold = [
        EventLabel::Kill,
        EventLabel::Dragon,
        EventLabel::Tower,
        EventLabel::Other,
        EventLabel::Other,
    ];
    let pairs: Vec<_> = gold.iter().map(|&g| (g, EventLabel::Other)).collect();
    let r = metrics(
        &ConfusionMatrix::from_pairs(EventLabel::ALL.to_vec(), &pairs)?,
        EvalMode::WithOther,
    );
    let zero_rows = EventLabel::EVENTS
        .iter()
        .filter_map(|&l| r.label(l))
        .filter(|m| (m.precision, m.recall, m.f1) != (0.0, 0.0, 0.0))
        .count();
    let other_ok = r
        .label(EventLabel::Other)
        .is_some_and(|m| m.recall == 1.0 && m.precision > 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(0..60);
        let pairs: Vec<(EventLabel, EventLabel)> = (0..n)
            .map(|_| {
                (
                    EventLabel::ALL[rng.random_range(0..4)],
                    EventLabel::ALL[rng.random_range(0..4)],
                )
            })
            .collect();
        let r = metrics(
            &ConfusionMatrix::from_pairs(EventLabel::ALL.to_vec(), &pairs)?,
            EvalMode::WithOther,
        );
        for m in &r.per_label {
            let tp = pairs.iter().filter(|p| p.0 == m.label && p.1 == m.label).count();
            let predicted = pairs.iter().filter(|p| p.1 == m.label).count();
            let actual = pairs.iter().filter(|p| p.0 == m.label).count();
            let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            if m.precision != div(tp, predicted) || m.recall != div(tp, actual) || m.support != actual as u64 {
                mismatches += 1;
            }
        }
        let macro_p = r.per_label.iter().map(|m| m.precision).sum::<f64>() / r.per_label.len() as f64;
        if r.macro_precision != macro_p || r.instances != n as u64 {
            mismatches += 1;
        }
    }

    Ok(vec![
        Check::within(
            "metrics.f1_from_table_pairs",
            f1_err,
            1e-3,
            "(0.740, 1.0) and (0.859, 0.421)",
        ),
        Check::within(
            "metrics.macro_precision",
            macro_err,
            1e-3,
            "mean of 0.646, 0.408, 0.220, 0.705",
        ),
        Check::count(
            "metrics.all_other_predictor",
            zero_rows + usize::from(!other_ok),
            "event rows all zero, OTHER recall 1",
        ),
        Check::count("metrics.brute_force_tally", mismatches, "200 random confusion matrices"),
    ])
}
