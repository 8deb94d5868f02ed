//! Pipeline steps behind each subcommand.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use mbnla::criteria::{self, CriteriaOptions, Statistics, MIN_SHOTS_PER_QUADRATURE};
use mbnla::gaussian::GaussianState;
use mbnla::measurement::{self, record_bytes, sample_shots, ShotSampler, DEFAULT_MEMORY_BUDGET};
use mbnla::nla::{self, FilterSpec};
use mbnla::qkd::{self, MonteCarloOptions, SweepMode, SweepSource};
use mbnla::stats;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Analysis, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::record_file::{self, hex, state_digest};
use crate::report::{self, Cell, RecordInfo, Report, Row, Table, REPORT_VERSION};

fn provenance(command: &str, parameters: Value, config: Option<&ExperimentConfig>) -> CliResult<Value> {
    Ok(json!({
        "command": command,
        "parameters": parameters,
        "experiment": match config {
            Some(c) => report::to_value(c)?,
            None => Value::Null,
        },
    }))
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSummary {
    pub path: PathBuf,
    pub state: String,
    pub n_shots: usize,
    pub seed: u64,
    pub state_digest: String,
    pub streamed: bool,
}

impl std::fmt::Display for SimulateSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "state={} n={} seed={} digest={} -> {}",
            self.state,
            self.n_shots,
            self.seed,
            &self.state_digest[..16],
            self.path.display()
        )
    }
}

/// Samples the configured state and writes the record, streaming to disk
/// when the shots would exceed the in-memory budget.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<SimulateSummary> {
    cfg.validate()?;
    let state = cfg.build_state()?;
    let streamed = record_bytes(cfg.shots) > DEFAULT_MEMORY_BUDGET;
    if streamed {
        record_file::write_streaming(out, ShotSampler::new(&state, cfg.shots, cfg.seed)?)?;
    } else {
        record_file::write_record(out, &sample_shots(&state, cfg.shots, cfg.seed)?)?;
    }
    Ok(SimulateSummary {
        path: out.to_path_buf(),
        state: state.label().to_string(),
        n_shots: cfg.shots,
        seed: cfg.seed,
        state_digest: hex(&state_digest(&state)),
        streamed,
    })
}

#[derive(Clone, Debug)]
pub struct FilterArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub gain: f64,
    pub cutoff_sd: f64,
    pub seed: u64,
    /// JSON-lines file the summary is appended to.
    pub summary: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct FilterSummary {
    pub input: String,
    pub output: String,
    pub gain: f64,
    pub cutoff_sd: f64,
    pub alpha_c: f64,
    pub seed: u64,
    pub n_in: usize,
    pub n_accept: usize,
    pub p_success: f64,
    pub p_success_se: f64,
    pub mean_filter_probability: f64,
    pub p_analytic: Option<f64>,
    pub error: Option<String>,
}

impl std::fmt::Display for FilterSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gain={} alpha_c={:.6} accepted={}/{} p_success={:.6e} (se {:.2e})",
            self.gain, self.alpha_c, self.n_accept, self.n_in, self.p_success, self.p_success_se
        )?;
        if let Some(p) = self.p_analytic {
            write!(f, " analytic={p:.6e}")?;
        }
        Ok(())
    }
}

fn append_line(path: &Path, line: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(path, e))
}

/// Post-selects a stored record. The cutoff is sized from the record's
/// source state. The summary line is appended even when no shot survives.
pub fn filter(args: &FilterArgs) -> CliResult<FilterSummary> {
    let (record, _) = record_file::read_record(&args.input)?;
    let source = &record.meta.source;
    let cutoff = nla::choose_cutoff(source, args.cutoff_sd)?;
    let spec = FilterSpec::new(args.gain, cutoff.alpha_c)?;
    let p_analytic = if record.meta.is_filtered() {
        None
    } else {
        nla::analytic_success_probability(source, &spec).ok()
    };
    let mut summary = FilterSummary {
        input: args.input.display().to_string(),
        output: args.out.display().to_string(),
        gain: args.gain,
        cutoff_sd: args.cutoff_sd,
        alpha_c: cutoff.alpha_c,
        seed: args.seed,
        n_in: record.len(),
        n_accept: 0,
        p_success: 0.0,
        p_success_se: 0.0,
        mean_filter_probability: 0.0,
        p_analytic,
        error: None,
    };
    match nla::apply_mbnla(&record, &spec, args.seed) {
        Ok(out) => {
            record_file::write_record(&args.out, &out.record)?;
            let n = out.n_in as f64;
            summary.n_accept = out.n_accept;
            summary.p_success = out.p_success;
            summary.p_success_se = (out.p_success * (1.0 - out.p_success) / n).sqrt();
            summary.mean_filter_probability = out.mean_filter_probability;
            append_line(&args.summary, &serde_json::to_string(&summary).expect("plain data"))?;
            Ok(summary)
        }
        Err(e) => {
            if let mbnla::Error::EmptyEnsemble { p_success_estimate, .. } = e {
                summary.mean_filter_probability = p_success_estimate;
            }
            summary.error = Some(e.to_string());
            append_line(&args.summary, &serde_json::to_string(&summary).expect("plain data"))?;
            Err(e.into())
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriteriaArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub n_boot: usize,
    pub seed: u64,
    pub normality: bool,
}

pub fn criteria(args: &CriteriaArgs, config: Option<&ExperimentConfig>) -> CliResult<Report> {
    let (record, header) = record_file::read_record(&args.input)?;
    let rep = criteria::criteria_report(
        &record,
        &CriteriaOptions {
            n_boot: args.n_boot,
            seed: args.seed,
            min_per_quadrature: MIN_SHOTS_PER_QUADRATURE,
            normality: args.normality,
        },
    )?;
    let mut rows: Vec<Row> = rep
        .rows()
        .into_iter()
        .map(|(n, v, lo, hi)| Row::with_ci(n, v, lo, hi))
        .collect();
    for i in 0..4 {
        for j in i..4 {
            let v = rep.cm_est[(i, j)];
            let se = rep.cm_standard_errors[(i, j)];
            rows.push(Row::with_ci(format!("cm_{i}{j}"), v, v - 2.0 * se, v + 2.0 * se));
        }
    }
    let report = Report {
        kind: "criteria".into(),
        version: REPORT_VERSION,
        config: provenance("criteria", report::to_value(args)?, config)?,
        record: Some(RecordInfo::new(&args.input, &header)),
        rows,
        detail: report::to_value(&rep)?,
    };
    report::write_report(&args.out_dir, "criteria", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct KeyrateArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub beta: f64,
    pub n_boot: usize,
    pub seed: u64,
}

pub fn keyrate(args: &KeyrateArgs, config: Option<&ExperimentConfig>) -> CliResult<Report> {
    let (record, header) = record_file::read_record(&args.input)?;
    let rep = qkd::key_rate_from_record(&record, args.beta, args.n_boot, args.seed, MIN_SHOTS_PER_QUADRATURE)?;
    let ci = rep.k_interval.expect("record key rates carry an interval");
    let rows = vec![
        Row::with_ci("k", rep.k, ci.low, ci.high),
        Row::new("i_ab", rep.i_ab),
        Row::new("s_ae", rep.s_ae),
        Row::new("s_ab", rep.s_ab),
        Row::new("s_b_given_a", rep.s_b_given_a),
        Row::new("nu_1", rep.nu[0]),
        Row::new("nu_2", rep.nu[1]),
        Row::new("t_eff", rep.t_eff),
        Row::new("xi", rep.xi),
        Row::new("v_source", rep.v_source),
        Row::new("beta_rec", rep.beta_rec),
    ];
    let report = Report {
        kind: "keyrate".into(),
        version: REPORT_VERSION,
        config: provenance("keyrate", report::to_value(args)?, config)?,
        record: Some(RecordInfo::new(&args.input, &header)),
        rows,
        detail: report::to_value(&rep)?,
    };
    report::write_report(&args.out_dir, "keyrate", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalityArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub confidence: f64,
}

pub fn normality(args: &NormalityArgs, config: Option<&ExperimentConfig>) -> CliResult<Report> {
    let (record, header) = record_file::read_record(&args.input)?;
    let rep = stats::normality_report(&record, args.confidence)?;
    let mut rows = Vec::new();
    for s in &rep.streams {
        rows.push(Row::with_ci(
            format!("{}.skewness", s.stream),
            s.skewness,
            s.skewness - 2.0 * s.se_skewness,
            s.skewness + 2.0 * s.se_skewness,
        ));
        rows.push(Row::with_ci(
            format!("{}.excess_kurtosis", s.stream),
            s.excess_kurtosis,
            s.excess_kurtosis - 2.0 * s.se_kurtosis,
            s.excess_kurtosis + 2.0 * s.se_kurtosis,
        ));
        rows.push(Row::new(format!("{}.jb_statistic", s.stream), s.jb_statistic));
        rows.push(Row::new(format!("{}.jb_pass", s.stream), if s.jb_pass { 1.0 } else { 0.0 }));
    }
    let report = Report {
        kind: "normality".into(),
        version: REPORT_VERSION,
        config: provenance("normality", report::to_value(args)?, config)?,
        record: Some(RecordInfo::new(&args.input, &header)),
        rows,
        detail: report::to_value(&rep)?,
    };
    report::write_report(&args.out_dir, "normality", &report)?;
    Ok(report)
}

pub fn export(input: &Path, out: &Path) -> CliResult<usize> {
    let (record, _) = record_file::read_record(input)?;
    record_file::export_csv(out, &record)?;
    Ok(record.len())
}

/// The three sweep tables.
#[derive(Clone, Debug)]
pub struct SweepTables {
    pub fig3: Table,
    pub fig4: Table,
    pub fig5: Table,
    pub errors: usize,
}

fn with_unity(gains: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = std::iter::once(1.0).chain(gains.iter().copied()).collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn err_cell<T>(r: &Result<T, String>) -> Cell {
    Cell::Text(r.as_ref().err().cloned().unwrap_or_default())
}

const FIG3_HEADER: [&str; 20] = [
    "gain",
    "p_success",
    "p_success_se",
    "p_analytic",
    "n_accept",
    "e_direct",
    "e_direct_low",
    "e_direct_high",
    "e_reverse",
    "e_reverse_low",
    "e_reverse_high",
    "duan_i",
    "duan_i_low",
    "duan_i_high",
    "e_direct_analytic",
    "e_reverse_analytic",
    "duan_i_analytic",
    "purity_analytic",
    "jb_pass",
    "errors",
];

struct Fig3Mc {
    p: f64,
    p_se: f64,
    n_accept: usize,
    report: criteria::CriteriaReport,
}

fn fig3_table(
    cfg: &ExperimentConfig,
    state: &GaussianState,
    record: Option<&measurement::MeasurementRecord>,
    alpha_c: f64,
    gains: &[f64],
) -> (Table, usize) {
    let mut t = Table::new(&FIG3_HEADER);
    let mut errors = 0;
    for &g in gains {
        let mut msgs: Vec<String> = Vec::new();
        let spec = FilterSpec::new(g, alpha_c);
        let p_analytic = spec
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|s| nla::analytic_success_probability(state, s).map_err(|e| e.to_string()));
        let analytic = nla::analytic_nla(state, g)
            .and_then(|s| Statistics::from_state(&s))
            .map_err(|e| e.to_string());
        let mc: Option<Result<Fig3Mc, String>> = record.map(|rec| {
            let spec = spec.clone().map_err(|e| e.to_string())?;
            let out = nla::apply_mbnla(rec, &spec, cfg.filter_seed()).map_err(|e| e.to_string())?;
            let report = criteria::criteria_report(
                &out.record,
                &CriteriaOptions {
                    n_boot: cfg.n_boot,
                    seed: cfg.seed,
                    min_per_quadrature: MIN_SHOTS_PER_QUADRATURE,
                    normality: cfg.has(Analysis::Normality),
                },
            )
            .map_err(|e| e.to_string())?;
            Ok(Fig3Mc {
                p: out.p_success,
                p_se: (out.p_success * (1.0 - out.p_success) / out.n_in as f64).sqrt(),
                n_accept: out.n_accept,
                report,
            })
        });
        for r in [p_analytic.as_ref().err(), analytic.as_ref().err()].into_iter().flatten() {
            msgs.push(r.clone());
        }
        let mc = match mc {
            Some(Err(e)) => {
                msgs.push(e);
                None
            }
            Some(Ok(m)) => Some(m),
            None => None,
        };
        let ci = |name: &str| -> [Cell; 3] {
            match &mc {
                Some(m) => {
                    let v = m.report.statistics().values()[Statistics::NAMES.iter().position(|n| *n == name).unwrap()];
                    let i = m.report.interval(name).unwrap();
                    [Cell::Num(v), Cell::Num(i.low), Cell::Num(i.high)]
                }
                None => {
                    let v = analytic.as_ref().ok().filter(|_| record.is_none()).map(|s| match name {
                        "e_direct" => s.e_direct,
                        "e_reverse" => s.e_reverse,
                        _ => s.duan_i,
                    });
                    [Cell::Opt(v), Cell::Opt(None), Cell::Opt(None)]
                }
            }
        };
        let (p, p_se, n_acc) = match (&mc, record) {
            (Some(m), _) => (Some(m.p), Some(m.p_se), Cell::Int(m.n_accept)),
            (None, None) => (p_analytic.as_ref().ok().copied(), None, Cell::Opt(None)),
            (None, Some(_)) => (None, None, Cell::Opt(None)),
        };
        let jb = mc
            .as_ref()
            .and_then(|m| m.report.normality.as_ref())
            .map(|n| Cell::Flag(n.all_pass))
            .unwrap_or(Cell::Text(String::new()));
        let an = analytic.as_ref().ok();
        if !msgs.is_empty() {
            errors += 1;
        }
        let mut cells = vec![Cell::Num(g), Cell::Opt(p), Cell::Opt(p_se), Cell::Opt(p_analytic.as_ref().ok().copied()), n_acc];
        for name in ["e_direct", "e_reverse", "duan_i"] {
            cells.extend(ci(name));
        }
        cells.extend([
            Cell::Opt(an.map(|s| s.e_direct)),
            Cell::Opt(an.map(|s| s.e_reverse)),
            Cell::Opt(an.map(|s| s.duan_i)),
            Cell::Opt(an.map(|s| s.purity)),
            jb,
            Cell::Text(msgs.join("; ")),
        ]);
        t.push(cells);
    }
    (t, errors)
}

fn fig4_table(cfg: &ExperimentConfig, gains: &[f64]) -> CliResult<(Table, usize)> {
    let mut t = Table::new(&[
        "transmissivity",
        "gain",
        "duan_i",
        "e_direct",
        "e_reverse",
        "perfect_epr_bound",
        "margin",
        "below_bound",
        "errors",
    ]);
    let base = cfg.build_state()?;
    let mut errors = 0;
    for &tr in &cfg.sweep.transmissivities {
        let bound = criteria::perfect_epr_bound(tr)?;
        let lossy = base.apply_loss(mbnla::gaussian::Mode::B, tr, 0.0);
        for &g in gains {
            let stats: Result<Statistics, String> = lossy
                .clone()
                .and_then(|s| nla::analytic_nla(&s, g))
                .and_then(|s| Statistics::from_state(&s))
                .map_err(|e| e.to_string());
            if stats.is_err() {
                errors += 1;
            }
            let s = stats.as_ref().ok();
            t.push(vec![
                Cell::Num(tr),
                Cell::Num(g),
                Cell::Opt(s.map(|s| s.duan_i)),
                Cell::Opt(s.map(|s| s.e_direct)),
                Cell::Opt(s.map(|s| s.e_reverse)),
                Cell::Num(bound.value),
                Cell::Opt(s.map(|s| bound.value - s.duan_i)),
                s.map(|s| Cell::Flag(s.duan_i < bound.value)).unwrap_or(Cell::Text(String::new())),
                err_cell(&stats),
            ]);
        }
    }
    Ok((t, errors))
}

fn fig5_table(
    cfg: &ExperimentConfig,
    state: &GaussianState,
    record: Option<&measurement::MeasurementRecord>,
    alpha_c: f64,
    gains: &[f64],
    beta: f64,
) -> CliResult<(Table, usize)> {
    let mut t = Table::new(&[
        "gain", "k", "k_low", "k_high", "k_se", "i_ab", "s_ae", "t_eff", "xi", "p_success", "errors",
    ]);
    let mc = MonteCarloOptions {
        alpha_c,
        filter_seed: cfg.filter_seed(),
        n_boot: cfg.n_boot,
        boot_seed: cfg.seed,
        min_per_quadrature: MIN_SHOTS_PER_QUADRATURE,
    };
    let points = match record {
        Some(r) => qkd::keyrate_sweep(SweepSource::Record(r), gains, beta, SweepMode::MonteCarlo, Some(&mc))?,
        None => qkd::keyrate_sweep(SweepSource::State(state), gains, beta, SweepMode::Analytic, None)?,
    };
    let mut errors = 0;
    for p in points {
        let out = p.outcome.map_err(|e| e.to_string());
        if out.is_err() {
            errors += 1;
        }
        let r = out.as_ref().ok();
        let ci = r.and_then(|r| r.k_interval);
        t.push(vec![
            Cell::Num(p.gain),
            Cell::Opt(r.map(|r| r.k)),
            Cell::Opt(ci.map(|c| c.low)),
            Cell::Opt(ci.map(|c| c.high)),
            Cell::Opt(ci.map(|c| c.standard_error)),
            Cell::Opt(r.map(|r| r.i_ab)),
            Cell::Opt(r.map(|r| r.s_ae)),
            Cell::Opt(r.map(|r| r.t_eff)),
            Cell::Opt(r.map(|r| r.xi)),
            Cell::Opt(r.and_then(|r| r.p_success)),
            err_cell(&out),
        ]);
    }
    Ok((t, errors))
}

/// Builds the success-probability, loss and key-rate tables. Failures at
/// single points land in the `errors` column.
pub fn sweep_tables(cfg: &ExperimentConfig, mode: SweepMode) -> CliResult<SweepTables> {
    cfg.validate()?;
    let state = cfg.build_state()?;
    let gains = with_unity(&cfg.filter.gains);
    let cutoff = nla::choose_cutoff(&state, cfg.filter.cutoff_sd)?;
    let record = match mode {
        SweepMode::Analytic => None,
        SweepMode::MonteCarlo => Some(sample_shots(&state, cfg.shots, cfg.seed)?),
    };
    let empty = |h: &[&'static str]| (Table::new(h), 0);
    let (fig3, e3) = if cfg.has(Analysis::Criteria) {
        fig3_table(cfg, &state, record.as_ref(), cutoff.alpha_c, &gains)
    } else {
        empty(&FIG3_HEADER)
    };
    let (fig4, e4) = if cfg.has(Analysis::Criteria) {
        fig4_table(cfg, &gains)?
    } else {
        empty(&["transmissivity"])
    };
    let (fig5, e5) = if cfg.has(Analysis::Keyrate) {
        fig5_table(cfg, &state, record.as_ref(), cutoff.alpha_c, &gains, cfg.beta_rec)?
    } else {
        empty(&["gain"])
    };
    Ok(SweepTables {
        fig3,
        fig4,
        fig5,
        errors: e3 + e4 + e5,
    })
}

pub fn sweep(cfg: &ExperimentConfig, mode: SweepMode, out_dir: &Path) -> CliResult<SweepTables> {
    let tables = sweep_tables(cfg, mode)?;
    report::write_text(&out_dir.join("fig3.csv"), &tables.fig3.to_csv())?;
    report::write_text(&out_dir.join("fig4.csv"), &tables.fig4.to_csv())?;
    report::write_text(&out_dir.join("fig5.csv"), &tables.fig5.to_csv())?;
    let report = Report {
        kind: "sweep".into(),
        version: REPORT_VERSION,
        config: provenance("sweep", json!({ "mode": mode }), Some(cfg))?,
        record: None,
        rows: vec![
            Row::new("fig3_rows", tables.fig3.len() as f64),
            Row::new("fig4_rows", tables.fig4.len() as f64),
            Row::new("fig5_rows", tables.fig5.len() as f64),
            Row::new("errors", tables.errors as f64),
        ],
        detail: json!({
            "fig3": tables.fig3.to_json(),
            "fig4": tables.fig4.to_json(),
            "fig5": tables.fig5.to_json(),
        }),
    };
    report::write_report(out_dir, "sweep", &report)?;
    Ok(tables)
}
