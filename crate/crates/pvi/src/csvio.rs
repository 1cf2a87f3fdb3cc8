//! Field and viscosity-report CSV files.
//!
//! A field file starts with the comment line `# pvi-field v1`, then the
//! header `t,x1..xd,u1..uk,se1..sek` and one row per node, time-major with
//! points in lexicographic order. Numbers are written with 17 significant
//! digits so that a re-import reproduces every value exactly.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use pvi_core::field::{FieldGrid, SolutionField};
use pvi_core::viscosity::SweepReport;

pub const FIELD_MAGIC: &str = "# pvi-field v1";

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CsvError + '_ {
    move |source| CsvError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CsvError + '_ {
    move |source| CsvError::Csv { path: path.to_path_buf(), source }
}

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

pub fn field_header(d: usize, k: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("x{i}")));
    h.extend((1..=k).map(|i| format!("u{i}")));
    h.extend((1..=k).map(|i| format!("se{i}")));
    h
}

pub fn write_field<W: Write>(field: &SolutionField, mut out: W) -> Result<(), csv::Error> {
    writeln!(out, "{FIELD_MAGIC}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(field_header(field.d, field.k))?;
    let mut order: Vec<usize> = (0..field.grid.points.len()).collect();
    order.sort_by(|&a, &b| lex(&field.grid.points[a], &field.grid.points[b]));
    for (ti, &t) in field.grid.times.iter().enumerate() {
        for &pi in &order {
            let mut rec = vec![num(t)];
            rec.extend(field.grid.points[pi].iter().map(|&v| num(v)));
            rec.extend(field.value(ti, pi).iter().map(|&v| num(v)));
            rec.extend(field.se(ti, pi).iter().map(|&v| num(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_field(field: &SolutionField, path: &Path) -> Result<(), CsvError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_field(field, std::io::BufWriter::new(f)).map_err(csv_err(path))
}

pub fn field_to_string(field: &SolutionField) -> String {
    let mut buf = Vec::new();
    write_field(field, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Parses a field file. The grid is rebuilt from the rows, which must form
/// a full tensor of times and points.
pub fn read_field<R: Read>(input: R, path: &Path) -> Result<SolutionField, CsvError> {
    let fmt = |reason: String| CsvError::Format { path: path.to_path_buf(), reason };
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first).map_err(io_err(path))?;
    if first.trim_end() != FIELD_MAGIC {
        return Err(fmt(format!("expected first line {FIELD_MAGIC:?}, found {:?}", first.trim_end())));
    }
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let k = header.iter().filter(|h| h.starts_with('u')).count();
    if d == 0 || k == 0 || header != field_header(d, k) {
        return Err(fmt(format!("unexpected header {}", header.join(","))));
    }
    let mut times: Vec<f64> = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<[Vec<f64>; 3]> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| fmt(format!("row {}: {e}", line + 1)))?;
        let t = vals[0];
        let x = vals[1..1 + d].to_vec();
        if times.last() != Some(&t) {
            if times.contains(&t) {
                return Err(fmt(format!("rows for t = {t} are not contiguous")));
            }
            times.push(t);
        }
        if times.len() == 1 {
            points.push(x.clone());
        }
        rows.push([x, vals[1 + d..1 + d + k].to_vec(), vals[1 + d + k..].to_vec()]);
    }
    let np = points.len();
    if rows.len() != times.len() * np || np == 0 {
        return Err(fmt(format!("{} rows do not form a {} x {} grid", rows.len(), times.len(), np)));
    }
    let mut values = Vec::with_capacity(rows.len() * k);
    let mut stderr = Vec::with_capacity(rows.len() * k);
    for (i, [x, u, se]) in rows.into_iter().enumerate() {
        if x != points[i % np] {
            return Err(fmt(format!("row {} has point {x:?}, expected {:?}", i + 1, points[i % np])));
        }
        values.extend(u);
        stderr.extend(se);
    }
    Ok(SolutionField {
        d,
        k,
        grid: FieldGrid::new(times, points),
        values,
        stderr,
        provenance: Default::default(),
        warnings: Vec::new(),
    })
}

pub fn import_field(path: &Path) -> Result<SolutionField, CsvError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_field(f, path)
}

pub fn write_sweep<W: Write>(rep: &SweepReport, d: usize, k: usize, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("x{i}")));
    h.extend((1..=k).map(|i| format!("z{i}")));
    h.extend(["res_super", "res_sub", "fit_residual", "flag"].map(String::from));
    w.write_record(&h)?;
    for r in &rep.rows {
        let mut rec = vec![num(r.t)];
        rec.extend(r.x.iter().map(|&v| num(v)));
        rec.extend(r.z.iter().map(|&v| num(v)));
        rec.extend([num(r.res_super), num(r.res_sub), num(r.fit_residual), r.flag.name().to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_sweep(rep: &SweepReport, d: usize, k: usize, path: &Path) -> Result<(), CsvError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_sweep(rep, d, k, std::io::BufWriter::new(f)).map_err(csv_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_like() -> SolutionField {
        let g = FieldGrid::new(vec![0.0, 0.25, 0.5], vec![vec![1.0], vec![-1.0], vec![0.0]]);
        let mut f = SolutionField::from_fn(1, 1, g, |t, x| vec![x[0] * x[0] + 1.0 - t + 1e-17]);
        for (i, s) in f.stderr.iter_mut().enumerate() {
            *s = 1.0 / (3.0 + i as f64);
        }
        f
    }

    #[test]
    fn single_node_is_header_plus_one_row() {
        let f = SolutionField::from_fn(1, 1, FieldGrid::new(vec![0.5], vec![vec![0.0]]), |_, _| vec![0.1]);
        let s = field_to_string(&f);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], FIELD_MAGIC);
        assert_eq!(lines[1], "t,x1,u1,se1");
        assert_eq!(lines[2], "5.0000000000000000e-1,0.0000000000000000e0,1.0000000000000001e-1,0.0000000000000000e0");
    }

    #[test]
    fn rows_are_time_major_and_lexicographic() {
        let s = field_to_string(&heat_like());
        assert_eq!(s.lines().count(), 11);
        let xs: Vec<f64> = s.lines().skip(2).take(3).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn round_trip_is_exact() {
        let f = heat_like();
        let back = read_field(field_to_string(&f).as_bytes(), Path::new("mem")).unwrap();
        for (ti, _) in f.grid.times.iter().enumerate() {
            for (pi, x) in f.grid.points.iter().enumerate() {
                let bi = back.grid.points.iter().position(|y| y == x).unwrap();
                assert_eq!(back.value(ti, bi), f.value(ti, pi));
                assert_eq!(back.se(ti, bi), f.se(ti, pi));
            }
        }
        assert_eq!(field_to_string(&back), field_to_string(&f));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let s = field_to_string(&heat_like());
        let p = Path::new("mem");
        assert!(read_field(s.replacen("v1", "v2", 1).as_bytes(), p).is_err());
        let dropped: String = s.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(read_field(dropped.as_bytes(), p).is_err());
        assert!(read_field(s.replacen("se1", "sx1", 1).as_bytes(), p).is_err());
        assert!(read_field(s.replace("1.0000000000000000e0,", "abc,").as_bytes(), p).is_err());
    }
}
