//! Separation objectives and metrics.
//!
//! The plain functions ([`si_snr`], [`pit_assign`], [`sdr`], the
//! improvement variants) are the evaluation path. The training loss is
//! assembled on an autodiff tape from the same formulas; a test pins the
//! two routes together.
//!
//! The multi-term objective averages the activated loss terms: the final
//! output (always), the first `n_sep - 1` separator passes decoded through
//! the shared splitter and decoder, the last separator pass's splitter
//! output decoded, and the first `n_re - 1` reconstructor passes decoded.
//! Terms whose averages would be empty are dropped and the activated-term
//! count `K` shrinks accordingly.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tape, Var};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::{SeparationOutput, StageEstimates};

/// Ratio floor shared by every metric denominator.
pub const EPS: f64 = 1e-8;

const LN10: f64 = std::f64::consts::LN_10;

// ----------------------------------------------------------------------
// Plain metrics
// ----------------------------------------------------------------------

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mu).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR in dB, optionally without mean removal.
pub fn si_snr_raw(est: &Waveform, reference: &Waveform, remove_mean: bool) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "length mismatch: est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    let (e, r): (Vec<f64>, Vec<f64>) = if remove_mean {
        (zero_mean(&est.samples), zero_mean(&reference.samples))
    } else {
        (est.samples.clone(), reference.samples.clone())
    };
    let ref_energy = dot(&r, &r);
    if ref_energy <= 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    let alpha = dot(&e, &r) / (ref_energy + EPS);
    let target_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = e
        .iter()
        .zip(&r)
        .map(|(x, y)| {
            let d = x - alpha * y;
            d * d
        })
        .sum();
    Ok(10.0 * (target_energy / (err_energy + EPS)).log10())
}

/// Scale-invariant SNR in dB with mean removal.
pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_raw(est, reference, true)
}

/// Plain energy-ratio SDR in dB.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape("length mismatch".into()));
    }
    let ref_energy = reference.energy();
    if ref_energy <= 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    let err_energy: f64 = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(10.0 * (ref_energy / (err_energy + EPS)).log10())
}

/// SI-SNR improvement of an estimate over the unprocessed mixture.
pub fn si_snr_improvement(
    est: &Waveform,
    reference: &Waveform,
    mixture: &Waveform,
) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mixture, reference)?)
}

/// SDR improvement of an estimate over the unprocessed mixture.
pub fn sdr_improvement(est: &Waveform, reference: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(n, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    rec(n, &mut current, &mut used, &mut out);
    out
}

/// Exhaustive permutation-invariant assignment maximizing mean SI-SNR.
///
/// Returns the best mean score and the permutation `perm`, where
/// `perm[i]` is the reference assigned to estimate `i`. Ties resolve to
/// the lexicographically smallest permutation.
pub fn pit_assign(est: &[Waveform], refs: &[Waveform]) -> Result<(f64, Vec<usize>)> {
    if est.len() != refs.len() || est.is_empty() {
        return Err(Error::Shape(format!(
            "pit needs matching non-empty sets, got {} vs {}",
            est.len(),
            refs.len()
        )));
    }
    let j = est.len();
    if j > 8 {
        return Err(Error::TooManySources(j));
    }
    // Precompute the pairwise score table; zero-energy refs error out here.
    let mut table = vec![vec![0.0; j]; j];
    for (i, e) in est.iter().enumerate() {
        for (k, r) in refs.iter().enumerate() {
            table[i][k] = si_snr(e, r)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(j) {
        let mean = perm
            .iter()
            .enumerate()
            .map(|(i, &k)| table[i][k])
            .sum::<f64>()
            / j as f64;
        match &best {
            Some((b, _)) if mean <= *b => {}
            _ => best = Some((mean, perm)),
        }
    }
    Ok(best.expect("at least one permutation"))
}

// ----------------------------------------------------------------------
// Loss configuration
// ----------------------------------------------------------------------

/// The four supervision points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Last,
    Sep,
    Split,
    Re,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Last => "last",
            LossTerm::Sep => "sep",
            LossTerm::Split => "split",
            LossTerm::Re => "re",
        }
    }
}

/// How auxiliary terms choose their speaker assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PitMode {
    /// Every estimate set solves its own assignment.
    #[default]
    PerTerm,
    /// The final output's assignment is reused everywhere.
    FinalAnchored,
}

/// Which loss terms are active and how they are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub activated: BTreeSet<LossTerm>,
    pub weight_last: f64,
    pub weight_sep: f64,
    pub weight_split: f64,
    pub weight_re: f64,
    pub pit_mode: PitMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_label("1+3").expect("default label")
    }
}

impl LossConfig {
    pub fn new(terms: impl IntoIterator<Item = LossTerm>) -> Self {
        let mut activated: BTreeSet<LossTerm> = terms.into_iter().collect();
        activated.insert(LossTerm::Last);
        Self {
            activated,
            weight_last: 1.0,
            weight_sep: 1.0,
            weight_split: 1.0,
            weight_re: 1.0,
            pit_mode: PitMode::PerTerm,
        }
    }

    /// Display-label table: `1` is the final loss alone, `3` adds the
    /// reconstructor passes, `1+3` adds the splitter output, and `1x2+3`
    /// activates everything.
    pub fn from_label(label: &str) -> Result<Self> {
        let terms: &[LossTerm] = match label {
            "1" => &[],
            "3" => &[LossTerm::Re],
            "1+3" => &[LossTerm::Re, LossTerm::Split],
            "1x2+3" => &[LossTerm::Re, LossTerm::Split, LossTerm::Sep],
            other => {
                return Err(Error::Config(format!("unknown loss label: {other}")));
            }
        };
        Ok(Self::new(terms.iter().copied()))
    }

    /// Inverse of [`LossConfig::from_label`] for the canonical term sets.
    pub fn label(&self) -> String {
        let has = |t| self.activated.contains(&t);
        match (has(LossTerm::Sep), has(LossTerm::Split), has(LossTerm::Re)) {
            (false, false, false) => "1".into(),
            (false, false, true) => "3".into(),
            (false, true, true) => "1+3".into(),
            (true, true, true) => "1x2+3".into(),
            _ => {
                let names: Vec<&str> = self.activated.iter().map(|t| t.name()).collect();
                names.join("+")
            }
        }
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Last => self.weight_last,
            LossTerm::Sep => self.weight_sep,
            LossTerm::Split => self.weight_split,
            LossTerm::Re => self.weight_re,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.activated.contains(&LossTerm::Last) {
            return Err(Error::Config("loss term 'last' must be activated".into()));
        }
        for t in [LossTerm::Last, LossTerm::Sep, LossTerm::Split, LossTerm::Re] {
            let w = self.weight(t);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "weight for '{}' must be a nonnegative finite number",
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

/// The assembled objective: total, per-term values, the activated-term
/// count, and the assignment each term used.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<LossTerm, f64>,
    pub k: usize,
    pub permutations: BTreeMap<LossTerm, Vec<usize>>,
}

/// Weighted average over non-vacuous activated components.
fn combine(components: &BTreeMap<LossTerm, f64>, cfg: &LossConfig) -> (f64, usize) {
    let k = components.len();
    if k == 0 {
        return (0.0, 0);
    }
    let sum: f64 = components
        .iter()
        .map(|(t, v)| cfg.weight(*t) * v)
        .sum();
    (sum / k as f64, k)
}

/// Negative PIT mean SI-SNR of one estimate set, with the chosen
/// permutation.
fn stage_loss(est: &[Waveform], refs: &[Waveform], anchored: Option<&[usize]>) -> Result<(f64, Vec<usize>)> {
    match anchored {
        Some(perm) => {
            let mut sum = 0.0;
            for (i, &k) in perm.iter().enumerate() {
                sum += si_snr(&est[i], &refs[k])?;
            }
            Ok((-(sum / est.len() as f64), perm.to_vec()))
        }
        None => {
            let (score, perm) = pit_assign(est, refs)?;
            Ok((-score, perm))
        }
    }
}

/// Computes the multi-term objective from a completed forward pass.
pub fn total_loss(
    output: &SeparationOutput,
    refs: &[Waveform],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if refs.len() != output.waves.len() {
        return Err(Error::Shape(format!(
            "got {} references for {} estimates",
            refs.len(),
            output.waves.len()
        )));
    }
    let (n_sep, n_re) = output.applied_depths;
    let final_perm = pit_assign(&output.waves, refs)?.1;
    let anchor = |perm: &Vec<usize>| -> Option<Vec<usize>> {
        match cfg.pit_mode {
            PitMode::PerTerm => None,
            PitMode::FinalAnchored => Some(perm.clone()),
        }
    };

    let mut components = BTreeMap::new();
    let mut permutations = BTreeMap::new();

    // Final output loss.
    let (l_last, perm_last) = stage_loss(&output.waves, refs, anchor(&final_perm).as_deref())?;
    components.insert(LossTerm::Last, l_last);
    permutations.insert(LossTerm::Last, perm_last);

    let need_estimates = |term: &'static str| -> Result<&StageEstimates> {
        output
            .stage_estimates
            .as_ref()
            .ok_or(Error::MissingIntermediates { term })
    };

    if cfg.activated.contains(&LossTerm::Sep) && n_sep > 1 {
        let est = &need_estimates("sep")?.sep;
        if est.len() != n_sep - 1 {
            return Err(Error::MissingIntermediates { term: "sep" });
        }
        let mut sum = 0.0;
        let mut last_perm = Vec::new();
        for stage in est {
            let (v, p) = stage_loss(stage, refs, anchor(&final_perm).as_deref())?;
            sum += v;
            last_perm = p;
        }
        components.insert(LossTerm::Sep, sum / est.len() as f64);
        permutations.insert(LossTerm::Sep, last_perm);
    }

    if cfg.activated.contains(&LossTerm::Split) {
        let est = &need_estimates("split")?.split;
        let (v, p) = stage_loss(est, refs, anchor(&final_perm).as_deref())?;
        components.insert(LossTerm::Split, v);
        permutations.insert(LossTerm::Split, p);
    }

    if cfg.activated.contains(&LossTerm::Re) && n_re > 1 {
        let est = &need_estimates("re")?.re;
        if est.len() != n_re - 1 {
            return Err(Error::MissingIntermediates { term: "re" });
        }
        let mut sum = 0.0;
        let mut last_perm = Vec::new();
        for stage in est {
            let (v, p) = stage_loss(stage, refs, anchor(&final_perm).as_deref())?;
            sum += v;
            last_perm = p;
        }
        components.insert(LossTerm::Re, sum / est.len() as f64);
        permutations.insert(LossTerm::Re, last_perm);
    }

    let (total, k) = combine(&components, cfg);
    Ok(LossBreakdown {
        total,
        components,
        k,
        permutations,
    })
}

// ----------------------------------------------------------------------
// Tape-based objective (training path)
// ----------------------------------------------------------------------

/// Per-reference constants reused across stage losses.
struct RefConsts {
    vars: Vec<Var>,
    energies: Vec<f64>,
    plain: Vec<Waveform>,
}

impl RefConsts {
    fn new(tape: &mut Tape, refs: &[Waveform]) -> Result<Self> {
        let mut vars = Vec::new();
        let mut energies = Vec::new();
        for r in refs {
            let zm = zero_mean(&r.samples);
            let energy = dot(&zm, &zm);
            if energy <= 0.0 {
                return Err(Error::ZeroEnergyReference);
            }
            vars.push(tape.leaf(ndarray::Array1::from_vec(zm).into_dyn()));
            energies.push(energy);
        }
        Ok(Self {
            vars,
            energies,
            plain: refs.to_vec(),
        })
    }
}

/// SI-SNR of one estimate row against one zero-meaned reference constant.
fn si_snr_on_tape(tape: &mut Tape, est: Var, rc: &RefConsts, k: usize) -> Var {
    let mean = tape.mean_all(est);
    let ezm = tape.sub(est, mean);
    let prod = tape.mul(ezm, rc.vars[k]);
    let d = tape.sum_all(prod);
    let alpha = tape.scale(d, 1.0 / (rc.energies[k] + EPS));
    let target = tape.mul(alpha, rc.vars[k]);
    let t2 = tape.mul(target, target);
    let num = tape.sum_all(t2);
    let diff = tape.sub(ezm, target);
    let d2 = tape.mul(diff, diff);
    let den0 = tape.sum_all(d2);
    let den = tape.add_scalar(den0, EPS);
    let ln_num = tape.ln(num);
    let ln_den = tape.ln(den);
    let ratio = tape.sub(ln_num, ln_den);
    tape.scale(ratio, 10.0 / LN10)
}

/// Splits a `[J, L]` wave var into per-speaker `[L]` rows.
fn wave_rows(tape: &mut Tape, waves: Var) -> Vec<Var> {
    let sh = tape.shape(waves).to_vec();
    (0..sh[0])
        .map(|j| {
            let row = tape.narrow(waves, 0, j, 1);
            tape.reshape(row, &[sh[1]])
        })
        .collect()
}

fn waves_from_tape(tape: &Tape, waves: Var, sr: u32) -> Vec<Waveform> {
    let v = tape.value(waves);
    let (j, l) = (v.shape()[0], v.shape()[1]);
    (0..j)
        .map(|s| Waveform::new((0..l).map(|i| v[[s, i]]).collect(), sr))
        .collect()
}

/// Negative PIT mean SI-SNR of one `[J, L]` estimate var.
fn stage_loss_on_tape(
    tape: &mut Tape,
    est: Var,
    rc: &RefConsts,
    anchored: Option<&[usize]>,
) -> Result<(Var, Vec<usize>)> {
    let est_waves = waves_from_tape(tape, est, rc.plain[0].sample_rate);
    let perm = match anchored {
        Some(p) => p.to_vec(),
        None => pit_assign(&est_waves, &rc.plain)?.1,
    };
    let rows = wave_rows(tape, est);
    let mut acc: Option<Var> = None;
    for (i, &k) in perm.iter().enumerate() {
        let s = si_snr_on_tape(tape, rows[i], rc, k);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let sum = acc.expect("at least one speaker");
    let loss = tape.scale(sum, -1.0 / perm.len() as f64);
    Ok((loss, perm))
}

/// Assembles the training objective on the forward tape.
///
/// Returns the scalar loss var together with the same breakdown the plain
/// [`total_loss`] would produce.
pub(crate) fn training_loss_on_tape(
    tape: &mut Tape,
    run: &crate::model::TapeRunView<'_>,
    refs: &[Waveform],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let rc = RefConsts::new(tape, refs)?;
    let (n_sep, n_re) = run.applied;
    let final_waves = waves_from_tape(tape, run.waves, refs[0].sample_rate);
    let final_perm = pit_assign(&final_waves, refs)?.1;
    let anchor = || -> Option<Vec<usize>> {
        match cfg.pit_mode {
            PitMode::PerTerm => None,
            PitMode::FinalAnchored => Some(final_perm.clone()),
        }
    };

    let mut components: BTreeMap<LossTerm, Var> = BTreeMap::new();
    let mut permutations = BTreeMap::new();

    let (l_last, perm) = stage_loss_on_tape(tape, run.waves, &rc, anchor().as_deref())?;
    components.insert(LossTerm::Last, l_last);
    permutations.insert(LossTerm::Last, perm);

    if cfg.activated.contains(&LossTerm::Sep) && n_sep > 1 {
        let stages = run
            .aux_sep
            .ok_or(Error::MissingIntermediates { term: "sep" })?;
        let mut acc: Option<Var> = None;
        let mut last_perm = Vec::new();
        for &stage in stages {
            let (v, p) = stage_loss_on_tape(tape, stage, &rc, anchor().as_deref())?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
            last_perm = p;
        }
        let mean = tape.scale(acc.unwrap(), 1.0 / stages.len() as f64);
        components.insert(LossTerm::Sep, mean);
        permutations.insert(LossTerm::Sep, last_perm);
    }

    if cfg.activated.contains(&LossTerm::Split) {
        let split = run
            .aux_split
            .ok_or(Error::MissingIntermediates { term: "split" })?;
        let (v, p) = stage_loss_on_tape(tape, split, &rc, anchor().as_deref())?;
        components.insert(LossTerm::Split, v);
        permutations.insert(LossTerm::Split, p);
    }

    if cfg.activated.contains(&LossTerm::Re) && n_re > 1 {
        let stages = run
            .aux_re
            .ok_or(Error::MissingIntermediates { term: "re" })?;
        let mut acc: Option<Var> = None;
        let mut last_perm = Vec::new();
        for &stage in stages {
            let (v, p) = stage_loss_on_tape(tape, stage, &rc, anchor().as_deref())?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
            last_perm = p;
        }
        let mean = tape.scale(acc.unwrap(), 1.0 / stages.len() as f64);
        components.insert(LossTerm::Re, mean);
        permutations.insert(LossTerm::Re, last_perm);
    }

    let k = components.len();
    let mut total: Option<Var> = None;
    let mut values = BTreeMap::new();
    for (&term, &var) in &components {
        values.insert(term, tape.scalar_value(var));
        let weighted = tape.scale(var, cfg.weight(term));
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
    }
    let total_var = tape.scale(total.expect("last term always present"), 1.0 / k as f64);
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total_var),
        components: values,
        k,
        permutations,
    };
    Ok((total_var, breakdown))
}

/// Loss of one (mixture, references) pair at the given depths, without
/// gradients.
pub fn loss_of(
    params: &crate::model::ModelParams,
    mixture: &Waveform,
    refs: &[Waveform],
    n_sep: usize,
    n_re: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new(false);
    let pv = crate::model::ParamVars::new(&mut tape, params);
    let run = crate::model::forward_on_tape(&mut tape, &pv, params, mixture, n_sep, n_re, true)?;
    let (_, bd) = training_loss_on_tape(&mut tape, &run.view(), refs, cfg)?;
    Ok(bd.total)
}

/// Gradients of the loss with respect to every parameter tensor, keyed by
/// tensor name. Unused tensors map to zero gradients.
pub fn loss_gradients(
    params: &crate::model::ModelParams,
    mixture: &Waveform,
    refs: &[Waveform],
    n_sep: usize,
    n_re: usize,
    cfg: &LossConfig,
) -> Result<BTreeMap<String, crate::autodiff::Arr>> {
    let mut tape = Tape::new(true);
    let pv = crate::model::ParamVars::new(&mut tape, params);
    let run = crate::model::forward_on_tape(&mut tape, &pv, params, mixture, n_sep, n_re, true)?;
    let (loss_var, _) = training_loss_on_tape(&mut tape, &run.view(), refs, cfg)?;
    let mut grads = tape.backward(loss_var);
    let mut out = BTreeMap::new();
    for (name, var) in pv.iter() {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| ndarray::ArrayD::zeros(params.tensors[name].raw_dim()));
        out.insert(name.clone(), g);
    }
    Ok(out)
}
