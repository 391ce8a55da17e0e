//! Evaluation at arbitrary inference depths, depth sweeps, real-time
//! factor measurement, and report emission.

use rayon::prelude::*;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::datagen::{Manifest, MixtureExample, Split};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::{count_parameters, forward, ModelParams};
use crate::objectives::{pit_assign, sdr, si_snr};

/// Scores for one utterance after permutation alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub seed: u64,
    pub si_snri_db: f64,
    pub sdri_db: f64,
}

/// Aggregate metrics over one split at one depth setting.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mean_si_snri_db: f64,
    pub median_si_snri_db: f64,
    pub mean_sdri_db: f64,
    pub per_utterance: Vec<UtteranceResult>,
    pub depths: (usize, usize),
    pub utterance_count: usize,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluates an arbitrary separation function over a split.
///
/// The function maps a mixture example to J estimated waveforms; model
/// evaluation, identity baselines, and oracle stubs all fit this shape.
pub fn evaluate_with<F>(
    separate_fn: F,
    manifest: &Manifest,
    split: Split,
    depths: (usize, usize),
) -> Result<EvalResult>
where
    F: Fn(&MixtureExample) -> Result<Vec<Waveform>> + Sync,
{
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::Manifest(format!("split {} is empty", split.name())));
    }
    let rows: Vec<UtteranceResult> = entries
        .par_iter()
        .map(|entry| -> Result<UtteranceResult> {
            let ex = manifest.example(entry)?;
            let est = separate_fn(&ex)?;
            if est.len() != ex.sources.len() {
                return Err(Error::Shape(format!(
                    "separator produced {} estimates for {} sources",
                    est.len(),
                    ex.sources.len()
                )));
            }
            let (_, perm) = pit_assign(&est, &ex.sources)?;
            let mut si = 0.0;
            let mut sd = 0.0;
            for (i, &k) in perm.iter().enumerate() {
                let r = &ex.sources[k];
                si += si_snr(&est[i], r)? - si_snr(&ex.mixture, r)?;
                sd += sdr(&est[i], r)? - sdr(&ex.mixture, r)?;
            }
            let j = perm.len() as f64;
            Ok(UtteranceResult {
                seed: entry.seed,
                si_snri_db: si / j,
                sdri_db: sd / j,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let sis: Vec<f64> = rows.iter().map(|r| r.si_snri_db).collect();
    Ok(EvalResult {
        mean_si_snri_db: sis.iter().sum::<f64>() / n,
        median_si_snri_db: median(&sis),
        mean_sdri_db: rows.iter().map(|r| r.sdri_db).sum::<f64>() / n,
        utterance_count: rows.len(),
        per_utterance: rows,
        depths,
    })
}

/// Runs the model over a split at the requested depths and aggregates
/// permutation-aligned SI-SNRi / SDRi.
pub fn evaluate(
    params: &ModelParams,
    manifest: &Manifest,
    split: Split,
    n_sep: usize,
    n_re: usize,
) -> Result<EvalResult> {
    if n_sep < 1 || n_re < 1 {
        return Err(Error::Depth("evaluation depths must be >= 1".into()));
    }
    evaluate_with(
        |ex| Ok(forward(params, &ex.mixture, n_sep, n_re, false)?.waves),
        manifest,
        split,
        (n_sep, n_re),
    )
}

/// One row of a depth sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_sep: usize,
    pub n_re: usize,
    pub mean_si_snri_db: f64,
    pub mean_sdri_db: f64,
    pub param_count: usize,
    pub rtf: f64,
}

/// Scaling-curve report: one row per requested inference depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub model_label: String,
    pub dataset_label: String,
    pub rows: Vec<SweepRow>,
}

/// Evaluates every requested reconstructor depth and measures RTF per
/// row.
pub fn sweep(
    params: &ModelParams,
    manifest: &Manifest,
    split: Split,
    n_sep: usize,
    n_re_list: &[usize],
    rtf_repeats: usize,
    model_label: &str,
) -> Result<SweepReport> {
    if n_re_list.is_empty() {
        return Err(Error::Depth("sweep needs at least one n_re".into()));
    }
    let params_total = count_parameters(params);
    let duration = manifest.gen.duration;
    let mut rows = Vec::with_capacity(n_re_list.len());
    for &n_re in n_re_list {
        let ev = evaluate(params, manifest, split, n_sep, n_re)?;
        let rtf = measure_rtf(params, n_sep, n_re, duration, rtf_repeats)?;
        rows.push(SweepRow {
            n_sep,
            n_re,
            mean_si_snri_db: ev.mean_si_snri_db,
            mean_sdri_db: ev.mean_sdri_db,
            param_count: params_total,
            rtf,
        });
    }
    Ok(SweepReport {
        model_label: model_label.to_string(),
        dataset_label: format!("{}[{}]", split.name(), manifest.split_entries(split).len()),
        rows,
    })
}

/// Median wall-clock forward time divided by audio duration. One warmup
/// run is excluded; at least 3 timed repeats are required.
pub fn measure_rtf(
    params: &ModelParams,
    n_sep: usize,
    n_re: usize,
    duration_secs: f64,
    repeats: usize,
) -> Result<f64> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "rtf needs at least 3 repeats, got {repeats}"
        )));
    }
    let sample_rate = 8000u32;
    let len = ((duration_secs * sample_rate as f64).round() as usize).max(1);
    // Deterministic probe signal.
    let samples: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            0.1 * (2.0 * std::f64::consts::PI * (220.0 + 120.0 * t) * t).sin()
        })
        .collect();
    let probe = Waveform::new(samples, sample_rate);
    forward(params, &probe, n_sep, n_re, false)?; // warmup
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        forward(params, &probe, n_sep, n_re, false)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&times) / duration_secs)
}

/// Report serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::Format(format!("unknown report format: {other}"))),
        }
    }
}

/// Renders a sweep report.
pub fn render_report(report: &SweepReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("model,n_sep,n_re,params,si_snri_db,sdri_db,rtf\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6}\n",
                    report.model_label,
                    r.n_sep,
                    r.n_re,
                    r.param_count,
                    r.mean_si_snri_db,
                    r.mean_sdri_db,
                    r.rtf
                ));
            }
            out
        }
        ReportFormat::Text => {
            let mut out = format!(
                "model {} on {}\n{:>6} {:>6} {:>10} {:>12} {:>10} {:>10}\n",
                report.model_label, report.dataset_label, "n_sep", "n_re", "params", "si_snri_db", "sdri_db", "rtf"
            );
            for r in &report.rows {
                out.push_str(&format!(
                    "{:>6} {:>6} {:>10} {:>12.3} {:>10.3} {:>10.4}\n",
                    r.n_sep, r.n_re, r.param_count, r.mean_si_snri_db, r.mean_sdri_db, r.rtf
                ));
            }
            out
        }
    }
}

/// Writes a report to `path`.
pub fn emit_report(report: &SweepReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(report, format))?;
    Ok(())
}

/// Parses a CSV produced by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<SweepReport> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
    if header != "model,n_sep,n_re,params,si_snri_db,sdri_db,rtf" {
        return Err(Error::Format(format!("unexpected csv header: {header}")));
    }
    let mut model_label = String::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!("csv row {} malformed", i + 2)));
        }
        model_label = cols[0].to_string();
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad float: {s}")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer: {s}")))
        };
        rows.push(SweepRow {
            n_sep: parse_u(cols[1])?,
            n_re: parse_u(cols[2])?,
            param_count: parse_u(cols[3])?,
            mean_si_snri_db: parse_f(cols[4])?,
            mean_sdri_db: parse_f(cols[5])?,
            rtf: parse_f(cols[6])?,
        });
    }
    Ok(SweepReport {
        model_label,
        dataset_label: String::new(),
        rows,
    })
}

/// Renders scaling curves (SI-SNRi against inference depth, one polyline
/// per report) as a standalone SVG document.
pub fn render_sweep_svg(reports: &[SweepReport]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (64.0, 24.0, 32.0, 48.0);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for rep in reports {
        for r in &rep.rows {
            xs.push(r.n_re as f64);
            ys.push(r.mean_si_snri_db);
        }
    }
    let (x0, x1) = xs
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if (y1 - y0).abs() < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.08 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(1e-9) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">inference depth (n_re)</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 {})\">SI-SNRi [dB]</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    // Ticks.
    let mut xt = x0;
    while xt <= x1 + 1e-9 {
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\" font-size=\"11\">{4}</text>\n",
            sx(xt),
            h - mb,
            h - mb + 5.0,
            h - mb + 18.0,
            xt
        ));
        xt += 1.0;
    }
    for k in 0..=4 {
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\" font-size=\"11\">{5:.2}</text>\n",
            ml - 5.0,
            sy(yv),
            ml,
            ml - 8.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    for (i, rep) in reports.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = rep
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.n_re as f64), sy(r.mean_si_snri_db)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for r in &rep.rows {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(r.n_re as f64),
                sy(r.mean_si_snri_db)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            w - mr - 180.0,
            mt + 16.0 * (i + 1) as f64,
            rep.model_label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the scaling-curve SVG.
pub fn emit_sweep_svg(reports: &[SweepReport], path: &Path) -> Result<()> {
    std::fs::write(path, render_sweep_svg(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatasetSpec, GenParams};
    use crate::dsp::StftConfig;
    use crate::model::{init_model, ModelConfig, SplitterKind};

    fn nano_manifest() -> Manifest {
        let gen = GenParams {
            duration: 0.05,
            ..GenParams::default()
        };
        build_dataset(&DatasetSpec::new(2, 2, 4, gen)).unwrap()
    }

    fn nano_params() -> ModelParams {
        let cfg = ModelConfig {
            d: 4,
            j: 2,
            m_sep: 1,
            n_sep: 1,
            m_re: 1,
            n_re: 2,
            heads: 2,
            ffn_expansion: 1.0,
            conv_kernel: 3,
            splitter_kind: SplitterKind::Conv2dSwiglu,
            share_separator: true,
            share_reconstructor: true,
            stft: StftConfig::new(16, 8),
            iteration_residual: true,
        };
        init_model(&cfg, 9).unwrap()
    }

    #[test]
    fn identity_stub_scores_zero() {
        let manifest = nano_manifest();
        let ev = evaluate_with(
            |ex| Ok(vec![ex.mixture.clone(), ex.mixture.clone()]),
            &manifest,
            Split::Test,
            (1, 1),
        )
        .unwrap();
        assert_eq!(ev.utterance_count, 4);
        assert!(ev.mean_si_snri_db.abs() < 1e-9, "{}", ev.mean_si_snri_db);
    }

    #[test]
    fn oracle_stub_scores_positive() {
        let manifest = nano_manifest();
        let ev = evaluate_with(
            |ex| Ok(ex.sources.clone()),
            &manifest,
            Split::Test,
            (1, 1),
        )
        .unwrap();
        assert!(ev.mean_si_snri_db > 20.0, "{}", ev.mean_si_snri_db);
        assert_eq!(ev.per_utterance.len(), ev.utterance_count);
    }

    #[test]
    fn evaluate_is_pure() {
        let manifest = nano_manifest();
        let params = nano_params();
        let a = evaluate(&params, &manifest, Split::Val, 1, 2).unwrap();
        let b = evaluate(&params, &manifest, Split::Val, 1, 2).unwrap();
        assert_eq!(a.per_utterance, b.per_utterance);
    }

    #[test]
    fn sweep_rows_match_standalone_evaluate() {
        let manifest = nano_manifest();
        let params = nano_params();
        let report = sweep(&params, &manifest, Split::Val, 1, &[1, 2], 3, "nano").unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let ev = evaluate(&params, &manifest, Split::Val, 1, row.n_re).unwrap();
            assert!((row.mean_si_snri_db - ev.mean_si_snri_db).abs() < 1e-12);
            assert_eq!(row.param_count, crate::model::count_parameters(&params));
        }
        // Single-element sweep equals evaluate.
        let single = sweep(&params, &manifest, Split::Val, 1, &[2], 3, "nano").unwrap();
        assert_eq!(single.rows.len(), 1);
        assert!(
            (single.rows[0].mean_si_snri_db - report.rows[1].mean_si_snri_db).abs() < 1e-12
        );
    }

    #[test]
    fn rtf_needs_three_repeats_and_grows_with_depth() {
        let params = nano_params();
        assert!(measure_rtf(&params, 1, 1, 0.05, 1).is_err());
        let shallow = measure_rtf(&params, 1, 1, 0.2, 5).unwrap();
        let deep = measure_rtf(&params, 1, 6, 0.2, 5).unwrap();
        assert!(deep > shallow, "rtf {deep} vs {shallow}");
    }

    #[test]
    fn csv_round_trip_and_line_count() {
        let report = SweepReport {
            model_label: "sep1x1-re1x2".into(),
            dataset_label: "val[2]".into(),
            rows: (1..=8)
                .map(|n_re| SweepRow {
                    n_sep: 1,
                    n_re,
                    mean_si_snri_db: 1.23456789 * n_re as f64,
                    mean_sdri_db: -0.5 + n_re as f64,
                    param_count: 1234,
                    rtf: 0.01 * n_re as f64,
                })
                .collect(),
        };
        let csv = render_report(&report, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 9, "header + 8 rows");
        let back = parse_report_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 8);
        for (a, b) in report.rows.iter().zip(&back.rows) {
            assert!((a.mean_si_snri_db - b.mean_si_snri_db).abs() < 1e-4);
            assert!((a.rtf - b.rtf).abs() < 1e-4);
            assert_eq!(a.param_count, b.param_count);
        }
        assert!("xml".parse::<ReportFormat>().is_err());
        let text = render_report(&report, ReportFormat::Text);
        assert!(text.contains("sep1x1-re1x2"));
    }

    #[test]
    fn svg_contains_one_polyline_per_model() {
        let mk = |label: &str| SweepReport {
            model_label: label.into(),
            dataset_label: "test".into(),
            rows: (1..=4)
                .map(|n_re| SweepRow {
                    n_sep: 1,
                    n_re,
                    mean_si_snri_db: n_re as f64,
                    mean_sdri_db: n_re as f64,
                    param_count: 10,
                    rtf: 0.1,
                })
                .collect(),
        };
        let svg = render_sweep_svg(&[mk("a"), mk("b")]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
