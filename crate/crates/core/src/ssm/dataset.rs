//! Offline trajectory datasets and their CSV exchange format.
//!
//! One row per `(traj_id, k)`, header `traj_id,k,x1..x{d_x},z1..z{d_z}`,
//! rows sorted by trajectory then time, floats with 17 significant digits.
//! Row `k = 0` carries the initial state and its measurement.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Mat;
use crate::{Error, Result};

/// Ground-truth states and measurements of one trajectory, `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryItem {
    pub id: u64,
    /// `(K+1) x d_x`, row `k` is `x_k`.
    pub states: Mat,
    /// `(K+1) x d_z`, row `k` is `z_k`.
    pub measurements: Mat,
}

impl TrajectoryItem {
    pub fn from_columns(id: u64, states: &[Mat], measurements: &[Mat]) -> Result<Self> {
        if states.len() != measurements.len() || states.is_empty() {
            return Err(Error::Config(
                "states and measurements must be nonempty and aligned".into(),
            ));
        }
        let stack = |cols: &[Mat]| -> Result<Mat> {
            let d = cols[0].rows();
            let mut data = Vec::with_capacity(cols.len() * d);
            for c in cols {
                if c.shape() != (d, 1) {
                    return Err(Error::Config(format!(
                        "ragged trajectory column {:?}",
                        c.shape()
                    )));
                }
                data.extend_from_slice(c.as_slice());
            }
            Ok(Mat::from_vec(cols.len(), d, data)?)
        };
        Ok(Self {
            id,
            states: stack(states)?,
            measurements: stack(measurements)?,
        })
    }

    /// Number of filtering steps `K`.
    pub fn horizon(&self) -> usize {
        self.states.rows() - 1
    }

    pub fn d_x(&self) -> usize {
        self.states.cols()
    }

    pub fn d_z(&self) -> usize {
        self.measurements.cols()
    }

    pub fn state(&self, k: usize) -> Mat {
        Mat::col(self.states.row(k))
    }

    pub fn measurement(&self, k: usize) -> Mat {
        Mat::col(self.measurements.row(k))
    }
}

/// Which part of a dataset an item belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Train/validation/test partition of a trajectory collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<TrajectoryItem>,
    pub val: Vec<TrajectoryItem>,
    pub test: Vec<TrajectoryItem>,
}

impl SplitDataset {
    /// Partitions in order: first the train share, then validation, then test.
    pub fn from_items(items: Vec<TrajectoryItem>, fractions: [f64; 3]) -> Result<Self> {
        let [n_train, n_val, _] = split_counts(items.len(), fractions)?;
        let mut items = items;
        let rest = items.split_off(n_train);
        let mut val = rest;
        let test = val.split_off(n_val);
        Ok(Self {
            train: items,
            val,
            test,
        })
    }

    pub fn get(&self, split: Split) -> &[TrajectoryItem] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Item counts per split. Train and validation are rounded, test takes the
/// remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    Ok([n_train, n_val, n - n_train - n_val])
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes trajectories in the CSV exchange format.
pub fn write_csv<W: Write>(
    out: W,
    items: &[TrajectoryItem],
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let (d_x, d_z) = items.first().map_or((0, 0), |i| (i.d_x(), i.d_z()));
    let mut header = vec!["traj_id".to_string(), "k".to_string()];
    header.extend((1..=d_x).map(|i| format!("x{i}")));
    header.extend((1..=d_z).map(|i| format!("z{i}")));
    if !items.is_empty() {
        w.write_record(&header)?;
    }
    let mut sorted: Vec<&TrajectoryItem> = items.iter().collect();
    sorted.sort_by_key(|i| i.id);
    for item in sorted {
        for k in 0..=item.horizon() {
            let mut rec = vec![item.id.to_string(), k.to_string()];
            rec.extend(item.states.row(k).iter().map(|v| fmt_f64(*v)));
            rec.extend(item.measurements.row(k).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, items: &[TrajectoryItem]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_csv(file, items).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::Csv {
            path: path.display().to_string(),
            line: 0,
            message: format!("{other:?}"),
        },
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<TrajectoryItem>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    read_csv(&text, &path.display().to_string())
}

/// Parses the CSV exchange format. `source` names the input in errors.
pub fn read_csv(text: &str, source: &str) -> Result<Vec<TrajectoryItem>> {
    let err = |line: usize, message: String| Error::Csv {
        path: source.to_string(),
        line,
        message,
    };
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "traj_id" || &header[1] != "k" {
        return Err(err(1, "header must start with traj_id,k".into()));
    }
    let d_x = header.iter().filter(|h| h.starts_with('x')).count();
    let d_z = header.iter().filter(|h| h.starts_with('z')).count();
    let expected: Vec<String> = ["traj_id".to_string(), "k".to_string()]
        .into_iter()
        .chain((1..=d_x).map(|i| format!("x{i}")))
        .chain((1..=d_z).map(|i| format!("z{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(err(
            1,
            format!("unexpected header, want {}", expected.join(",")),
        ));
    }

    struct Building {
        id: u64,
        states: Vec<Mat>,
        meas: Vec<Mat>,
        first_line: usize,
    }
    let mut items = Vec::new();
    let mut current: Option<Building> = None;
    let mut horizon: Option<usize> = None;
    let mut finish = |b: Building, items: &mut Vec<TrajectoryItem>| -> Result<()> {
        let k = b.states.len() - 1;
        match horizon {
            Some(h) if h != k => {
                return Err(err(
                    b.first_line,
                    format!(
                        "trajectory {} has K = {k}, previous trajectories have K = {h}",
                        b.id
                    ),
                ))
            }
            _ => horizon = Some(k),
        }
        items.push(TrajectoryItem::from_columns(b.id, &b.states, &b.meas)?);
        Ok(())
    };

    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad traj_id `{}`", &rec[0])))?;
        let k: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad k `{}`", &rec[1])))?;
        let mut vals = Vec::with_capacity(d_x + d_z);
        for field in rec.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("bad float `{field}`")))?;
            vals.push(v);
        }
        let x = Mat::col(&vals[..d_x]);
        let z = Mat::col(&vals[d_x..]);
        match current.as_mut() {
            Some(b) if b.id == id => {
                if k != b.states.len() {
                    return Err(err(
                        line,
                        format!(
                            "trajectory {id}: expected k = {}, found {k}",
                            b.states.len()
                        ),
                    ));
                }
                b.states.push(x);
                b.meas.push(z);
            }
            _ => {
                if let Some(prev) = current.take() {
                    if id <= prev.id {
                        return Err(err(
                            line,
                            format!("rows not sorted by traj_id ({id} after {})", prev.id),
                        ));
                    }
                    finish(prev, &mut items)?;
                }
                if k != 0 {
                    return Err(err(
                        line,
                        format!("trajectory {id} must start at k = 0, found {k}"),
                    ));
                }
                current = Some(Building {
                    id,
                    states: vec![x],
                    meas: vec![z],
                    first_line: line,
                });
            }
        }
    }
    if let Some(b) = current {
        finish(b, &mut items)?;
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{generate, linear_benchmark};
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read_csv("", "mem").unwrap().is_empty());
    }

    #[test]
    fn hand_written_fixture() {
        let text = "traj_id,k,x1,x2,z1\n\
                    7,0,1.0,2.0,0.5\n\
                    7,1,1.5,2.5,0.25\n\
                    7,2,-3e-1,4,1e2\n\
                    7,3,0,0,-1\n";
        let items = read_csv(text, "mem").unwrap();
        assert_eq!(items.len(), 1);
        let it = &items[0];
        assert_eq!((it.id, it.horizon(), it.d_x(), it.d_z()), (7, 3, 2, 1));
        assert_eq!(it.state(2), Mat::col(&[-0.3, 4.0]));
        assert_eq!(it.measurement(2), Mat::col(&[100.0]));
        assert_eq!(it.measurement(3), Mat::col(&[-1.0]));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "traj_id,k,x1,z1\n0,0,1.0,2.0\n0,1,abc,2.0\n";
        match read_csv(text, "mem") {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "traj_id,k,x1,z1\n0,0,1.0,2.0\n0,1,1.0\n";
        assert!(matches!(
            read_csv(short, "mem"),
            Err(Error::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn inconsistent_horizon_rejected() {
        let text = "traj_id,k,x1,z1\n0,0,1,1\n0,1,1,1\n1,0,1,1\n";
        assert!(matches!(read_csv(text, "mem"), Err(Error::Csv { .. })));
        let gap = "traj_id,k,x1,z1\n0,0,1,1\n0,2,1,1\n";
        assert!(matches!(
            read_csv(gap, "mem"),
            Err(Error::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let (s, _) = linear_benchmark(10.0, 1.0, 1.0, 20);
        let items = generate(&s, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&path, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("traj_id,k,x1,x2,z1,z2\n"));
        assert!(!text.contains('\r'));
        assert_eq!(load_csv(&path).unwrap(), items);
    }

    #[test]
    fn split_counts_follow_fractions() {
        assert_eq!(split_counts(48, [0.71, 0.19, 0.10]).unwrap(), [34, 9, 5]);
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert!(split_counts(10, [0.5, 0.2, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bitwise(vals in proptest::collection::vec(-1e6f64..1e6, 12), id in 0u64..1000) {
            let states: Vec<Mat> = (0..3).map(|k| Mat::col(&vals[k * 4..k * 4 + 2])).collect();
            let meas: Vec<Mat> = (0..3).map(|k| Mat::col(&vals[k * 4 + 2..k * 4 + 4])).collect();
            let item = TrajectoryItem::from_columns(id, &states, &meas).unwrap();
            let mut buf = Vec::new();
            write_csv(&mut buf, std::slice::from_ref(&item)).unwrap();
            let back = read_csv(std::str::from_utf8(&buf).unwrap(), "mem").unwrap();
            prop_assert_eq!(back, vec![item]);
        }
    }
}
