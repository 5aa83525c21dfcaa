//! Run-directory layout, trajectory dumps and multi-run reports.
//!
//! ```text
//! <run>/config.snapshot    key=value, every field
//! <run>/metrics.csv        one row per epoch (METRICS_HEADER)
//! <run>/summary.txt        key=value final numbers
//! <run>/u.csv, v.csv       index,c0..c{K-1}
//! <run>/collab.csv         gamma on the first line, then K rows of M
//! <run>/collab_history.csv epoch,gamma,diag_mean,m_0_0..m_{K-1}_{K-1}
//! <run>/samples.csv        index,label,loss,u_label_sq
//! <run>/grads/trajectory.bin   when trajectories are recorded
//! <run>/grads/batches.csv      when gradient dumps are enabled
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::to_config_string;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ce_loss_index, forward};
use crate::par::map_ordered;
use crate::trainer::{RunLog, TrainConfig, TrainOutcome, Trajectory};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,grad_theta,grad_u,grad_v,grad_m,grad_gamma,\
nfr,diag_mean,gamma,omega_mean,omega_min,omega_max,\
omega_h0,omega_h1,omega_h2,omega_h3,omega_h4,omega_h5,omega_h6,omega_h7,\
omega_h8,omega_h9,omega_h10,omega_h11,omega_h12,omega_h13,omega_h14,omega_h15,\
sl_precision,sl_recall,su_precision,su_recall,clean_precision,\
clean_size,hard_size,noisy_size,partition_exact,corrections,corrected_total,correction_acc";

const TRAJECTORY_MAGIC: &[u8; 4] = b"CSRT";
const TRAJECTORY_VERSION: u32 = 1;

pub fn metrics_csv(log: &RunLog) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (e, g) in log.epochs.iter().zip(&log.gradients) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.test_accuracy,
            g.theta,
            g.u,
            g.v,
            g.m,
            g.gamma,
            e.nfr,
            e.diag_mean,
            e.gamma,
            e.omega_mean,
            e.omega_min,
            e.omega_max
        );
        for h in e.omega_hist {
            let _ = write!(out, ",{h}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{},{},{},{}",
            e.small_loss_precision,
            e.small_loss_recall,
            e.small_u_precision,
            e.small_u_recall,
            e.clean_precision,
            e.clean_size,
            e.hard_size,
            e.noisy_size,
            u8::from(e.partition_exact),
            e.corrections,
            e.corrected_total,
            e.correction_accuracy
        );
    }
    out
}

/// Parses one column of `metrics.csv` by name.
pub fn metrics_column(text: &str, column: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty metrics file".into(),
    })?;
    let idx = header.split(',').position(|c| c == column).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("no column {column:?}"),
    })?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let field = l.split(',').nth(idx).unwrap_or("");
            field.parse().map_err(|_| Error::Parse {
                line: i + 2,
                msg: format!("bad value {field:?} in {column}"),
            })
        })
        .collect()
}

fn matrix_csv(values: &[f64], cols: usize) -> String {
    let mut out = String::from("index");
    for c in 0..cols {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (i, row) in values.chunks(cols).enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a `u.csv` / `v.csv` dump back into a flat row-major array.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<f64>, usize)> {
    let mut lines = text.lines();
    let cols = lines.next().map_or(0, |h| h.split(',').count().saturating_sub(1));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        for f in line.split(',').skip(1) {
            out.push(f.parse().map_err(|_| Error::Parse {
                line: i + 2,
                msg: format!("bad value {f:?}"),
            })?);
        }
    }
    Ok((out, cols))
}

pub fn summary_text(config: &TrainConfig, outcome: &TrainOutcome) -> String {
    let log = &outcome.log;
    let mut s = String::new();
    let _ = writeln!(s, "method={}", config.method);
    let _ = writeln!(s, "seed={}", config.seed);
    let _ = writeln!(s, "epochs_completed={}", log.epochs.len());
    let _ = writeln!(s, "final_test_acc={}", log.final_test_accuracy());
    let _ = writeln!(s, "final_nfr={}", log.final_nfr());
    let _ = writeln!(
        s,
        "diverged_at={}",
        log.diverged_at.map_or_else(|| "none".to_string(), |e| e.to_string())
    );
    let _ = writeln!(s, "warnings={}", log.warnings.len());
    for w in &log.warnings {
        let _ = writeln!(s, "# {w}");
    }
    s
}

pub fn parse_summary(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Per-epoch snapshot of the collaboration matrix.
pub fn collab_history_csv(log: &RunLog, classes: usize) -> String {
    let mut out = String::from("epoch,gamma,diag_mean");
    for r in 0..classes {
        for c in 0..classes {
            let _ = write!(out, ",m_{r}_{c}");
        }
    }
    out.push('\n');
    for (e, m) in log.epochs.iter().zip(&log.collab_history) {
        let _ = write!(out, "{},{},{}", e.epoch, e.gamma, e.diag_mean);
        for x in m {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Writes the full run directory.
pub fn write_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome, train_set: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = train_set.classes;
    fs::write(dir.join("config.snapshot"), to_config_string(config))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.log))?;
    fs::write(dir.join("summary.txt"), summary_text(config, outcome))?;
    fs::write(dir.join("u.csv"), matrix_csv(&outcome.noise.u, k))?;
    fs::write(dir.join("v.csv"), matrix_csv(&outcome.noise.v, k))?;

    let mut collab = format!("gamma,{}\n", outcome.collab.gamma);
    for row in outcome.collab.m.chunks(k) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        collab.push_str(&cells.join(","));
        collab.push('\n');
    }
    fs::write(dir.join("collab.csv"), collab)?;
    fs::write(dir.join("collab_history.csv"), collab_history_csv(&outcome.log, k))?;

    let rows = train_set.rows();
    let losses = map_ordered(&rows, |x| forward(x, &outcome.model));
    let mut samples = String::from("index,label,loss,u_label_sq\n");
    for (i, p) in losses.into_iter().enumerate() {
        let y = train_set.labels[i];
        let u = outcome.noise.u[i * k + y];
        let _ = writeln!(samples, "{i},{y},{},{}", ce_loss_index(&p?, y), u * u);
    }
    fs::write(dir.join("samples.csv"), samples)?;

    let grads = dir.join("grads");
    if let Some(t) = &outcome.trajectory {
        fs::create_dir_all(&grads)?;
        save_trajectory(t, &grads.join("trajectory.bin"))?;
    }
    if !outcome.log.grad_dumps.is_empty() {
        fs::create_dir_all(&grads)?;
        let mut out = String::from("epoch,batch,theta,m,gamma\n");
        for (e, d) in outcome.log.grad_dumps.iter().enumerate() {
            for (b, t) in d.theta_per_batch.iter().enumerate() {
                let _ = writeln!(out, "{e},{b},{t},{},{}", d.m_per_batch[b], d.gamma_per_batch[b]);
            }
        }
        fs::write(grads.join("batches.csv"), out)?;
    }
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Little-endian binary: magic `CSRT`, u32 version, u64 samples, classes,
/// epochs; per epoch `v` (N*K f64), u64 batch count and per batch `M` (K*K
/// f64) then gamma; finally u64 length and the `v` gradient series.
pub fn save_trajectory(t: &Trajectory, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJECTORY_MAGIC);
    buf.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
    put_u64(&mut buf, t.samples as u64)?;
    put_u64(&mut buf, t.classes as u64)?;
    put_u64(&mut buf, t.v_snapshots.len() as u64)?;
    for (v, ms) in t.v_snapshots.iter().zip(&t.m_snapshots) {
        put_f64s(&mut buf, v)?;
        put_u64(&mut buf, ms.len() as u64)?;
        for (m, g) in ms {
            put_f64s(&mut buf, m)?;
            put_f64s(&mut buf, &[*g])?;
        }
    }
    put_u64(&mut buf, t.v_grad_series.len() as u64)?;
    put_f64s(&mut buf, &t.v_grad_series)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Io("truncated trajectory file".into()))?;
        Ok(b)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = Reader {
        inner: std::io::BufReader::new(fs::File::open(path)?),
    };
    if &r.bytes::<4>()? != TRAJECTORY_MAGIC {
        return Err(Error::Io(format!("{} is not a trajectory file", path.display())));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != TRAJECTORY_VERSION {
        return Err(Error::Io(format!("unsupported trajectory version {version}")));
    }
    let samples = r.u64()?;
    let classes = r.u64()?;
    let epochs = r.u64()?;
    let mut t = Trajectory {
        samples,
        classes,
        ..Trajectory::default()
    };
    for _ in 0..epochs {
        t.v_snapshots.push(r.f64s(samples * classes)?);
        let batches = r.u64()?;
        let mut ms = Vec::with_capacity(batches);
        for _ in 0..batches {
            let m = r.f64s(classes * classes)?;
            let g = r.f64s(1)?[0];
            ms.push((m, g));
        }
        t.m_snapshots.push(ms);
    }
    let len = r.u64()?;
    t.v_grad_series = r.f64s(len)?;
    Ok(t)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line of the aggregated report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nfr_mean: f64,
    pub nfr_std: f64,
}

/// Groups run directories by method and aggregates final accuracy and NFR.
pub fn report(dirs: &[&Path]) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for dir in dirs {
        let text = fs::read_to_string(dir.join("summary.txt"))?;
        let s = parse_summary(&text);
        let field = |k: &str| -> Result<f64> {
            s.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("{}: missing {k}", dir.display()),
                })
        };
        let method = s
            .get("method")
            .cloned()
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("{}: missing method", dir.display()),
            })?;
        let g = groups.entry(method).or_default();
        g.0.push(field("final_test_acc")?);
        g.1.push(field("final_nfr")?);
    }
    Ok(groups
        .into_iter()
        .map(|(method, (acc, nfr))| {
            let (acc_mean, acc_std) = mean_std(&acc);
            let (nfr_mean, nfr_std) = mean_std(&nfr);
            ReportRow {
                method,
                runs: acc.len(),
                acc_mean,
                acc_std,
                nfr_mean,
                nfr_std,
            }
        })
        .collect())
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("method      runs  test_acc           nfr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10}  {:>4}  {:.4} ± {:.4}  {:.4} ± {:.4}",
            r.method, r.runs, r.acc_mean, r.acc_std, r.nfr_mean, r.nfr_std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trip() {
        let t = Trajectory {
            samples: 2,
            classes: 2,
            v_snapshots: vec![vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -2.0, 3.5, 1e-300]],
            m_snapshots: vec![vec![(vec![1.0, 0.0, 0.0, 1.0], 1.0)], vec![(vec![0.9, 0.1, 0.0, 1.0], 1.01); 3]],
            v_grad_series: vec![0.0, 5.5],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_trajectory(&t, &p).unwrap();
        assert_eq!(load_trajectory(&p).unwrap(), t);
        fs::write(&p, b"XXXX").unwrap();
        assert!(load_trajectory(&p).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let v = vec![0.5, -1.25, 3.0, 1e-9, 0.0, 7.0];
        assert_eq!(parse_matrix_csv(&matrix_csv(&v, 3)).unwrap(), (v, 3));
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn summary_parse() {
        let s = parse_summary("method=csr\n# warn=1\nfinal_test_acc=0.5\n");
        assert_eq!(s["method"], "csr");
        assert!(!s.contains_key("# warn"));
    }
}
