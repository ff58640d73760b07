//! Reading back `sweep.csv` into a per-ratio summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use prunebench_core::fleet::SWEEP_HEADER;
use prunebench_core::{Method, RunManifest};

use crate::{CliError, CliResult};

/// Relative tolerance for the exact linearity identities.
const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Record {
    line: u64,
    rho: f64,
    method: Method,
    seed: u64,
    device: Option<usize>,
    test_acc: f64,
    latency_s: f64,
    energy_j: f64,
    storage_bytes: u64,
    train_flops: u64,
}

#[derive(Debug)]
struct Group {
    fleet: Record,
    devices: Vec<Record>,
}

/// One line of the report: a (rho, method) pair averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub rho: f64,
    pub method: Method,
    pub seeds: usize,
    pub test_acc: f64,
    /// Mean importance-minus-random gap, on importance rows.
    pub gap: Option<f64>,
    pub latency_s: f64,
    pub energy_j: f64,
    /// Mean training FLOPs relative to the full-data run of the same seed.
    pub cost_ratio: Option<f64>,
    /// Largest deviation of `cost_ratio` from `rho` allowed by step ceilings.
    pub ratio_slack: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub num_devices: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Broken linearity or consistency identities, one message each.
    pub violations: Vec<String>,
    pub has_manifest: bool,
}

impl Report {
    /// Reads `sweep.csv` and, when present, `manifest.json` from `dir`.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let csv_path = dir.join("sweep.csv");
        let text = std::fs::read_to_string(&csv_path).map_err(|e| {
            CliError::Core(prunebench_core::Error::Io {
                path: csv_path.clone(),
                source: e,
            })
        })?;
        let manifest_path = dir.join("manifest.json");
        let manifest = match std::fs::read_to_string(&manifest_path) {
            Ok(m) => {
                Some(
                    serde_json::from_str::<RunManifest>(&m).map_err(|e| CliError::Format {
                        path: manifest_path.clone(),
                        line: e.line() as u64,
                        reason: e.to_string(),
                    })?,
                )
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => {
                return Err(CliError::Core(prunebench_core::Error::Io {
                    path: manifest_path,
                    source: e,
                }))
            }
        };
        Self::from_csv(dir, &text, manifest.as_ref())
    }

    pub fn from_csv(dir: &Path, text: &str, manifest: Option<&RunManifest>) -> CliResult<Self> {
        let path = dir.join("sweep.csv");
        let fail = |line: u64, reason: String| CliError::Format {
            path: path.clone(),
            line,
            reason,
        };
        let records = parse(text, &path)?;
        if records.is_empty() {
            return Err(fail(1, "no data rows".into()));
        }

        let mut groups: Vec<Group> = Vec::new();
        for rec in records.iter().cloned() {
            match rec.device {
                None => groups.push(Group {
                    fleet: rec,
                    devices: Vec::new(),
                }),
                Some(dev) => {
                    let Some(g) = groups.last_mut() else {
                        return Err(fail(rec.line, "device row before any fleet row".into()));
                    };
                    if (g.fleet.rho, g.fleet.method, g.fleet.seed)
                        != (rec.rho, rec.method, rec.seed)
                    {
                        return Err(fail(
                            rec.line,
                            "device row does not match its fleet row".into(),
                        ));
                    }
                    if dev != g.devices.len() {
                        return Err(fail(
                            rec.line,
                            format!("expected device {}, found {dev}", g.devices.len()),
                        ));
                    }
                    g.devices.push(rec);
                }
            }
        }

        let k = groups[0].devices.len();
        if let Some(g) = groups.iter().find(|g| g.devices.len() != k || k == 0) {
            return Err(fail(
                g.fleet.line,
                format!("group has {} device rows, expected {k}", g.devices.len()),
            ));
        }
        let mut keys = BTreeSet::new();
        for g in &groups {
            if !keys.insert((g.fleet.rho.to_bits(), g.fleet.method, g.fleet.seed)) {
                return Err(fail(g.fleet.line, "duplicate (rho, method, seed)".into()));
            }
        }
        let rhos: BTreeSet<u64> = keys.iter().map(|k| k.0).collect();
        let methods: BTreeSet<Method> = keys.iter().map(|k| k.1).collect();
        let seeds: BTreeSet<u64> = keys.iter().map(|k| k.2).collect();
        if keys.len() != rhos.len() * methods.len() * seeds.len() {
            return Err(fail(
                0,
                format!(
                    "incomplete sweep: {} groups for {} ratios x {} methods x {} seeds",
                    keys.len(),
                    rhos.len(),
                    methods.len(),
                    seeds.len()
                ),
            ));
        }
        let mut slack_per_seed: BTreeMap<u64, f64> = BTreeMap::new();
        if let Some(m) = manifest {
            check_manifest(m, &records, &rhos, &methods, &seeds, k).map_err(|r| fail(0, r))?;
            if let Some(epochs) = m.config["train"]["epochs"].as_u64() {
                for g in groups.iter().filter(|g| g.fleet.method == Method::Full) {
                    let bound = k as f64 * epochs as f64 * m.train_step_flops as f64
                        / g.fleet.train_flops as f64;
                    slack_per_seed.insert(g.fleet.seed, bound);
                }
            }
        }

        let mut violations = Vec::new();
        check_fleet_sums(&groups, &mut violations);
        check_device_identities(&groups, &mut violations);

        let lookup: BTreeMap<(u64, Method, u64), &Group> = groups
            .iter()
            .map(|g| ((g.fleet.rho.to_bits(), g.fleet.method, g.fleet.seed), g))
            .collect();
        let mut rows = Vec::new();
        for &rho_bits in &rhos {
            let rho = f64::from_bits(rho_bits);
            for &method in &methods {
                let mut row = ReportRow {
                    rho,
                    method,
                    seeds: seeds.len(),
                    test_acc: 0.0,
                    gap: None,
                    latency_s: 0.0,
                    energy_j: 0.0,
                    cost_ratio: None,
                    ratio_slack: None,
                };
                let (mut gap, mut ratio, mut slack) = (0.0, 0.0, 0.0_f64);
                let (mut has_gap, mut has_ratio, mut has_slack) = (true, true, true);
                for &seed in &seeds {
                    let g = lookup[&(rho_bits, method, seed)];
                    row.test_acc += g.fleet.test_acc;
                    row.latency_s += g.fleet.latency_s;
                    row.energy_j += g.fleet.energy_j;
                    match lookup.get(&(rho_bits, Method::Random, seed)) {
                        Some(r) if method == Method::Importance => {
                            gap += g.fleet.test_acc - r.fleet.test_acc
                        }
                        _ => has_gap = false,
                    }
                    match lookup.get(&(rho_bits, Method::Full, seed)) {
                        Some(f) if f.fleet.train_flops > 0 => {
                            let r = g.fleet.train_flops as f64 / f.fleet.train_flops as f64;
                            ratio += r;
                            let expected = if method == Method::Full { 1.0 } else { rho };
                            match slack_per_seed.get(&seed) {
                                Some(&s) => {
                                    slack = slack.max(s);
                                    if (r - expected).abs() > s * (1.0 + IDENTITY_TOL) {
                                        violations.push(format!(
                                            "rho {rho} {method} seed {seed}: cost ratio {r:.6} is more than {s:.6} from {expected}"
                                        ));
                                    }
                                }
                                None => has_slack = false,
                            }
                        }
                        _ => has_ratio = false,
                    }
                }
                let n = seeds.len() as f64;
                row.test_acc /= n;
                row.latency_s /= n;
                row.energy_j /= n;
                row.gap = has_gap.then_some(gap / n);
                row.cost_ratio = has_ratio.then_some(ratio / n);
                row.ratio_slack = (has_ratio && has_slack).then_some(slack);
                rows.push(row);
            }
        }
        check_monotone(&rows, &mut violations);

        Ok(Report {
            dir: dir.to_path_buf(),
            num_devices: k,
            seeds: seeds.into_iter().collect(),
            rows,
            violations,
            has_manifest: manifest.is_some(),
        })
    }
}

fn parse(text: &str, path: &Path) -> CliResult<Vec<Record>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let fail = |line: u64, reason: String| CliError::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let header = reader.headers().map_err(|e| fail(1, e.to_string()))?;
    let expected: Vec<&str> = SWEEP_HEADER.split(',').collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(fail(1, format!("unexpected header, want `{SWEEP_HEADER}`")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| &rec[i];
        let num = |i: usize| -> CliResult<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|e| fail(line, format!("column {}: {e}", expected[i])))
        };
        let int = |i: usize| -> CliResult<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|e| fail(line, format!("column {}: {e}", expected[i])))
        };
        let method: Method = field(1)
            .parse()
            .map_err(|e: prunebench_core::Error| fail(line, e.to_string()))?;
        let device = match field(3) {
            "fleet" => None,
            _ => Some(int(3)? as usize),
        };
        out.push(Record {
            line,
            rho: num(0)?,
            method,
            seed: int(2)?,
            device,
            test_acc: num(5)?,
            latency_s: num(7)?,
            energy_j: num(8)?,
            storage_bytes: int(9)?,
            train_flops: int(11)?,
        });
    }
    Ok(out)
}

fn check_manifest(
    m: &RunManifest,
    records: &[Record],
    rhos: &BTreeSet<u64>,
    methods: &BTreeSet<Method>,
    seeds: &BTreeSet<u64>,
    k: usize,
) -> Result<(), String> {
    if m.sweep_rows != records.len() {
        return Err(format!(
            "manifest lists {} rows, sweep.csv has {}",
            m.sweep_rows,
            records.len()
        ));
    }
    let want_rhos: BTreeSet<u64> = m.rhos.iter().map(|r| r.to_bits()).collect();
    if &want_rhos != rhos {
        return Err(format!("ratios differ from manifest {:?}", m.rhos));
    }
    if let Some(devices) = m.config["partition"]["num_devices"].as_u64() {
        if devices as usize != k {
            return Err(format!("manifest has {devices} devices, sweep.csv has {k}"));
        }
    }
    if let Ok(want) = serde_json::from_value::<BTreeSet<u64>>(m.config["seeds"].clone()) {
        if &want != seeds {
            return Err(format!("seeds differ from manifest {want:?}"));
        }
    }
    if let Ok(want) = serde_json::from_value::<BTreeSet<Method>>(m.config["methods"].clone()) {
        if &want != methods {
            return Err(format!("methods differ from manifest {want:?}"));
        }
    }
    Ok(())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= IDENTITY_TOL * a.abs().max(b.abs())
}

fn check_fleet_sums(groups: &[Group], violations: &mut Vec<String>) {
    for g in groups {
        let f = &g.fleet;
        let flops: u64 = g.devices.iter().map(|d| d.train_flops).sum();
        let storage: u64 = g.devices.iter().map(|d| d.storage_bytes).sum();
        let latency: f64 = g.devices.iter().map(|d| d.latency_s).sum();
        if flops != f.train_flops || storage != f.storage_bytes || !close(latency, f.latency_s) {
            violations.push(format!(
                "rho {} {} seed {}: fleet row is not the sum of its devices",
                f.rho, f.method, f.seed
            ));
        }
    }
}

/// Per device, latency must be proportional to FLOPs and energy to latency.
fn check_device_identities(groups: &[Group], violations: &mut Vec<String>) {
    let mut per_device: BTreeMap<(u64, usize), Vec<&Record>> = BTreeMap::new();
    for g in groups {
        for d in &g.devices {
            per_device
                .entry((d.seed, d.device.unwrap_or(0)))
                .or_default()
                .push(d);
        }
    }
    for ((seed, dev), recs) in per_device {
        let Some(base) = recs.iter().find(|r| r.train_flops > 0 && r.latency_s > 0.0) else {
            continue;
        };
        let speed = base.latency_s / base.train_flops as f64;
        let power = base.energy_j / base.latency_s;
        for r in recs.iter().filter(|r| r.train_flops > 0) {
            if !close(r.latency_s / r.train_flops as f64, speed) {
                violations.push(format!(
                    "seed {seed} device {dev} rho {} {}: latency not linear in FLOPs",
                    r.rho, r.method
                ));
            }
            if !close(r.energy_j / r.latency_s, power) {
                violations.push(format!(
                    "seed {seed} device {dev} rho {} {}: energy not proportional to latency",
                    r.rho, r.method
                ));
            }
        }
    }
}

fn check_monotone(rows: &[ReportRow], violations: &mut Vec<String>) {
    for method in [Method::Importance, Method::Random] {
        let ratios: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.cost_ratio.map(|c| (r.rho, c)))
            .collect();
        for w in ratios.windows(2) {
            if w[1].1 < w[0].1 {
                violations.push(format!(
                    "{method}: cost ratio decreases from rho {} to rho {}",
                    w[0].0, w[1].0
                ));
            }
        }
    }
}

fn opt(v: Option<f64>, signed: bool) -> String {
    match v {
        Some(x) if signed => format!("{x:+.4}"),
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} devices, seeds {:?}",
            self.dir.display(),
            self.num_devices,
            self.seeds
        )?;
        writeln!(
            f,
            "{:<7} {:<11} {:>8} {:>8} {:>12} {:>12} {:>8} {:>8}",
            "rho", "method", "test_acc", "gap", "latency_s", "energy_J", "ratio", "slack"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<7} {:<11} {:>8.4} {:>8} {:>12.4} {:>12.4} {:>8} {:>8}",
                r.rho,
                r.method.as_str(),
                r.test_acc,
                opt(r.gap, true),
                r.latency_s,
                r.energy_j,
                opt(r.cost_ratio, false),
                opt(r.ratio_slack, false)
            )?;
        }
        if !self.has_manifest {
            writeln!(
                f,
                "no manifest.json: ratio slack unknown, ratio-vs-rho bound not checked"
            )?;
        }
        if self.violations.is_empty() {
            writeln!(f, "linearity: ok")
        } else {
            writeln!(f, "linearity: {} violation(s)", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  {v}")?;
            }
            Ok(())
        }
    }
}
