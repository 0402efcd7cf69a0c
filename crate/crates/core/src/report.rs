//! Closed-loop metric records and aligned text / CSV tables built from the
//! CSV artifacts the commands write.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Complex;
use crate::plant::UncertaintyMode;
use crate::sim::{mean_metrics, Metrics};

/// Per-run metrics of one controller under one uncertainty mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub controller: String,
    pub mode: UncertaintyMode,
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "controller,mode,run,mse_mod,gap,mse_ref,ma_ene,ma_con";

    pub fn new(controller: impl Into<String>, mode: UncertaintyMode, runs: Vec<Metrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("a metrics record needs at least one run".into()));
        }
        if runs.iter().any(|m| m.ma_ene < 0.0 || m.ma_con < 0.0) {
            return Err(Error::Contract("mean absolute metrics must be nonnegative".into()));
        }
        let mean = mean_metrics(&runs);
        Ok(MetricsRecord {
            controller: controller.into(),
            mode,
            runs,
            mean,
        })
    }

    /// One row per run, then a `mean` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let row = |run: &str, m: &Metrics| {
            format!(
                "{},{},{},{},{},{},{},{}",
                self.controller,
                self.mode,
                run,
                opt(m.mse_mod),
                opt(m.gap),
                m.mse_ref,
                m.ma_ene,
                m.ma_con
            )
        };
        let mut out: Vec<String> = self.runs.iter().enumerate().map(|(i, m)| row(&i.to_string(), m)).collect();
        out.push(row("mean", &self.mean));
        out
    }
}

/// Header-indexed CSV without quoting, as written by this crate.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<CsvTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Schema("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if r.len() != header.len() {
                return Err(Error::Parse {
                    line: i + 2,
                    detail: format!("{} fields, header has {}", r.len(), header.len()),
                });
            }
            rows.push(r);
        }
        Ok(CsvTable { header, rows })
    }

    /// Column indices of `names`; a schema error names the first missing one.
    pub fn require(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| Error::Schema(format!("missing column '{n}'")))
            })
            .collect()
    }
}

/// A rendered table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let ncol = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (j, c) in r.iter().enumerate().take(ncol) {
                width[j] = width[j].max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let pad = width[j] - c.chars().count();
                    if j == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let head = line(&self.header);
        let _ = writeln!(out, "{head}");
        let _ = writeln!(out, "{}", "-".repeat(head.chars().count()));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn num(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) => fmt_num(v),
        Err(_) if s.is_empty() => "-".into(),
        Err(_) => s.into(),
    }
}

fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0.000".into()
    } else if (0.1..1e4).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.3e}")
    }
}

/// N-step and open-loop test errors, one row per model and horizon.
pub fn sysid_table(csv: &CsvTable) -> Result<Table> {
    let c = csv.require(&["model", "N", "split", "nstep_mse", "openloop_mse"])?;
    let rows = csv
        .rows
        .iter()
        .filter(|r| r[c[2]] == "test")
        .map(|r| vec![r[c[0]].clone(), r[c[1]].clone(), num(&r[c[3]]), num(&r[c[4]])])
        .collect();
    Ok(Table {
        title: "System identification (test split)".into(),
        header: ["model", "N", "N-step MSE", "open-loop MSE"].map(String::from).to_vec(),
        rows,
        notes: Vec::new(),
    })
}

fn fmt_complex(z: &Complex) -> String {
    if z.im.abs() < 1e-12 {
        format!("{:.4}", z.re)
    } else {
        format!("{:.4}{:+.4}i", z.re, z.im)
    }
}

/// Learned eigenvalues per model with the plant's `True` row. Uses rows of
/// `horizon` when given, else the first horizon seen for each model.
pub fn eigen_table(csv: &CsvTable, truth: &[Complex], horizon: Option<usize>) -> Result<Table> {
    let c = csv.require(&["model", "re", "im"])?;
    let n_col = csv.header.iter().position(|h| h == "N");
    let mut order: Vec<String> = Vec::new();
    let mut by_model: BTreeMap<String, (String, Vec<Complex>)> = BTreeMap::new();
    for r in &csv.rows {
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Schema(format!("non-numeric eigenvalue entry '{s}'")))
        };
        let z = Complex::new(parse(&r[c[1]])?, parse(&r[c[2]])?);
        let n = n_col.map(|j| r[j].clone()).unwrap_or_default();
        if horizon.is_some_and(|h| n != h.to_string()) {
            continue;
        }
        let model = r[c[0]].clone();
        let entry = by_model.entry(model.clone()).or_insert_with(|| {
            order.push(model.clone());
            (n.clone(), Vec::new())
        });
        if entry.0 == n {
            entry.1.push(z);
        }
    }
    let width = truth.len().max(by_model.values().map(|v| v.1.len()).max().unwrap_or(0));
    let mut header = vec!["model".to_string()];
    header.extend((1..=width).map(|i| format!("lambda{i}")));
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push = |name: String, zs: &[Complex]| {
        let mut row = vec![name];
        row.extend((0..width).map(|i| zs.get(i).map_or("-".into(), fmt_complex)));
        rows.push(row);
    };
    push("True".into(), truth);
    for m in &order {
        push(m.clone(), &by_model[m].1);
    }
    Ok(Table {
        title: "Eigenvalues of the state transition matrix".into(),
        header,
        rows,
        notes: Vec::new(),
    })
}

/// Mean closed-loop metrics, one block of rows per controller and one
/// column per uncertainty mode.
pub fn simulate_table(csv: &CsvTable) -> Result<Table> {
    let c = csv.require(&["controller", "mode", "run", "mse_mod", "mse_ref", "ma_ene", "ma_con"])?;
    let metrics = [("MSE mod.", c[3]), ("MSE ref.", c[4]), ("MA ene.", c[5]), ("MA con.", c[6])];
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String, usize), String> = BTreeMap::new();
    for r in csv.rows.iter().filter(|r| r[c[2]] == "mean") {
        let ctrl = r[c[0]].clone();
        let mode: UncertaintyMode = r[c[1]].parse()?;
        if !order.contains(&ctrl) {
            order.push(ctrl.clone());
        }
        for (i, (_, j)) in metrics.iter().enumerate() {
            cells.insert((ctrl.clone(), mode.name().to_string(), i), num(&r[*j]));
        }
    }
    let mut header = vec!["controller".to_string(), "metric".to_string()];
    header.extend(UncertaintyMode::ALL.iter().map(|m| m.name().to_string()));
    let mut rows = Vec::new();
    for ctrl in &order {
        for (i, (label, _)) in metrics.iter().enumerate() {
            let vals: Vec<String> = UncertaintyMode::ALL
                .iter()
                .map(|m| cells.get(&(ctrl.clone(), m.name().to_string(), i)).cloned().unwrap_or("-".into()))
                .collect();
            if i == 0 && vals.iter().all(|v| v == "-") {
                continue;
            }
            let mut row = vec![ctrl.clone(), label.to_string()];
            row.extend(vals);
            rows.push(row);
        }
    }
    Ok(Table {
        title: "Closed-loop performance under uncertainty (mean over runs)".into(),
        header,
        rows,
        notes: Vec::new(),
    })
}

/// Per-step CPU time against the horizon.
pub fn bench_table(csv: &CsvTable) -> Result<Table> {
    let c = csv.require(&["controller", "N", "mean_s", "max_s", "median_of_means_s"])?;
    let mut ns: Vec<usize> = Vec::new();
    let mut cells: BTreeMap<(usize, String), (String, String, String)> = BTreeMap::new();
    for r in &csv.rows {
        let n: usize = r[c[1]]
            .parse()
            .map_err(|_| Error::Schema(format!("non-integer horizon '{}'", r[c[1]])))?;
        if !ns.contains(&n) {
            ns.push(n);
        }
        let ms = |s: &str| s.parse::<f64>().map(|v| fmt_num(v * 1e3)).unwrap_or("-".into());
        cells.insert((n, r[c[0]].clone()), (ms(&r[c[2]]), ms(&r[c[3]]), ms(&r[c[4]])));
    }
    ns.sort_unstable();
    let header = [
        "N",
        "DLMPC mean ms",
        "DLMPC max ms",
        "DLMPC median ms",
        "iMPC mean ms",
        "iMPC max ms",
        "iMPC median ms",
        "eMPC",
    ]
    .map(String::from)
    .to_vec();
    let dash = || ("-".to_string(), "-".to_string(), "-".to_string());
    let rows = ns
        .iter()
        .map(|&n| {
            let d = cells.get(&(n, "dlmpc".into())).cloned().unwrap_or_else(dash);
            let i = cells.get(&(n, "impc".into())).cloned().unwrap_or_else(dash);
            vec![n.to_string(), d.0, d.1, d.2, i.0, i.1, i.2, "not implemented".into()]
        })
        .collect();
    Ok(Table {
        title: "Per-step evaluation time".into(),
        header,
        rows,
        notes: vec!["Memory footprint: not measured.".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    fn sysid_csv() -> String {
        let mut s = String::from("model,N,split,nstep_mse,openloop_mse\n");
        for m in ModelKind::ALL {
            for n in [1, 8, 16, 32, 64, 256] {
                s += &format!("{m},{n},train,0.1,\n{m},{n},val,0.2,\n{m},{n},test,0.3,1.5\n");
            }
        }
        s
    }

    #[test]
    fn sysid_table_has_one_row_per_cell() {
        let t = sysid_table(&CsvTable::parse(&sysid_csv()).unwrap()).unwrap();
        assert_eq!(t.rows.len(), 24);
        assert_eq!(t.rows[0], vec!["lin", "1", "0.300", "1.500"]);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = CsvTable::parse("model,N,split\nlin,1,test\n").unwrap();
        let e = sysid_table(&csv).unwrap_err();
        assert!(matches!(e, Error::Schema(_)), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn eigen_table_leads_with_truth() {
        let csv = CsvTable::parse("model,N,re,im\nssm,8,0.99,0\nssm,8,0.5,0.1\nssm,8,0.5,-0.1\nssm,16,0.9,0\n").unwrap();
        let truth = [Complex::new(0.999, 0.0), Complex::new(0.254, 0.0)];
        let t = eigen_table(&csv, &truth, None).unwrap();
        assert_eq!(t.rows[0][0], "True");
        assert_eq!(t.rows[0][1], "0.9990");
        assert_eq!(t.rows[1], vec!["ssm", "0.9900", "0.5000+0.1000i", "0.5000-0.1000i"]);
        let t = eigen_table(&csv, &truth, Some(16)).unwrap();
        assert_eq!(t.rows[1], vec!["ssm", "0.9000", "-"]);
    }

    #[test]
    fn simulate_table_has_four_mode_columns() {
        let m = Metrics {
            mse_mod: None,
            gap: None,
            mse_ref: 1.0,
            ma_ene: 2.0,
            ma_con: 0.0,
        };
        let rec = MetricsRecord::new("lqr", UncertaintyMode::W, vec![m.clone(), m]).unwrap();
        let text = format!("{}\n{}\n", MetricsRecord::CSV_HEADER, rec.csv_rows().join("\n"));
        let t = simulate_table(&CsvTable::parse(&text).unwrap()).unwrap();
        assert_eq!(t.header, vec!["controller", "metric", "none", "w", "v", "wv"]);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0], vec!["lqr", "MSE ref.", "-", "1.000", "-", "-"]);
    }

    #[test]
    fn bench_table_marks_empc() {
        let csv = CsvTable::parse(
            "controller,N,samples,mean_s,max_s,median_of_means_s,amortized\ndlmpc,1,10,1e-6,2e-6,1e-6,false\nimpc,1,10,1e-4,2e-4,1e-4,false\n",
        )
        .unwrap();
        let t = bench_table(&csv).unwrap();
        assert_eq!(t.rows[0][7], "not implemented");
        assert_eq!(t.rows[0][1], "1.000e-3");
        assert!(t.to_text().contains("not measured"));
    }

    #[test]
    fn ragged_row_is_parse_error() {
        assert!(matches!(CsvTable::parse("a,b\n1\n"), Err(Error::Parse { line: 2, .. })));
    }
}
