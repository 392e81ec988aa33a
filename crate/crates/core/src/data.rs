//! LIBSVM datasets: streaming parser, writer, agent partitioning and a
//! synthetic generator shaped like `a9a`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, stream};

/// Feature dimension of `a9a`.
pub const A9A_DIM: usize = 123;
/// Number of training samples in the published `a9a` file.
pub const A9A_SAMPLES: usize = 32561;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot split {samples} samples across {agents} agents")]
    TooManyAgents { agents: usize, samples: usize },
    #[error("empty dataset")]
    Empty,
    #[error("feature index {index} exceeds dimension {dim}")]
    IndexOutOfRange { index: u32, dim: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    /// Label in `{0, 1}`.
    pub label: f64,
    /// `(1-based index, value)`, indices strictly increasing.
    pub features: Vec<(u32, f64)>,
}

impl SparseSample {
    /// `theta^T h` with `theta` indexed from zero.
    #[inline]
    pub fn dot(&self, theta: &[f64]) -> f64 {
        self.features
            .iter()
            .map(|&(i, v)| theta[i as usize - 1] * v)
            .sum()
    }

    pub fn max_index(&self) -> u32 {
        self.features.last().map_or(0, |&(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SparseSample>,
    pub dim: usize,
}

/// One agent's share of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    samples: Vec<SparseSample>,
    dim: usize,
}

impl Shard {
    pub fn new(samples: Vec<SparseSample>, dim: usize) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        for s in &samples {
            let idx = s.max_index();
            if idx as usize > dim {
                return Err(DataError::IndexOutOfRange { index: idx, dim });
            }
        }
        Ok(Self { samples, dim })
    }

    pub fn samples(&self) -> &[SparseSample] {
        &self.samples
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    #[default]
    Contiguous,
    RoundRobin,
    LabelSkewed,
}

fn parse_err(line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        reason: reason.into(),
    }
}

fn map_label(token: &str, line: usize) -> Result<f64, DataError> {
    let y: f64 = token
        .parse()
        .map_err(|_| parse_err(line, format!("non-numeric label {token:?}")))?;
    if y == 1.0 {
        Ok(1.0)
    } else if y == -1.0 || y == 0.0 {
        Ok(0.0)
    } else {
        Err(parse_err(line, format!("label {token} is not binary")))
    }
}

fn parse_line(text: &str, line: usize) -> Result<Option<SparseSample>, DataError> {
    let body = text.split('#').next().unwrap_or("");
    let mut tokens = body.split_whitespace();
    let Some(label) = tokens.next() else {
        return Ok(None);
    };
    let label = map_label(label, line)?;
    let mut features: Vec<(u32, f64)> = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| parse_err(line, format!("missing ':' in {tok:?}")))?;
        let idx: u32 = idx
            .parse()
            .map_err(|_| parse_err(line, format!("bad feature index {idx:?}")))?;
        if idx == 0 {
            return Err(parse_err(line, "feature indices start at 1"));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| parse_err(line, format!("bad feature value {val:?}")))?;
        if !val.is_finite() {
            return Err(parse_err(line, format!("non-finite value {val}")));
        }
        if let Some(&(prev, _)) = features.last() {
            if idx <= prev {
                return Err(parse_err(
                    line,
                    format!("index {idx} does not increase after {prev}"),
                ));
            }
        }
        features.push((idx, val));
    }
    Ok(Some(SparseSample { label, features }))
}

/// Parses LIBSVM text one line at a time. Labels `{-1, +1}` and `{0, 1}`
/// map to `{0, 1}`; the dimension is the largest index seen unless
/// `dim_override` is given (which must then cover every index).
pub fn parse_libsvm<R: BufRead>(reader: R, dim_override: Option<usize>) -> Result<Dataset, DataError> {
    let mut samples = Vec::new();
    let mut max_idx = 0u32;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some(s) = parse_line(&line, i + 1)? {
            max_idx = max_idx.max(s.max_index());
            samples.push(s);
        }
    }
    let dim = match dim_override {
        Some(d) if (max_idx as usize) > d => {
            return Err(DataError::IndexOutOfRange { index: max_idx, dim: d })
        }
        Some(d) => d,
        None => max_idx as usize,
    };
    Ok(Dataset { samples, dim })
}

/// Opens `path`, decompressing when the name ends in `.gz`.
pub fn load_libsvm(path: &Path, dim_override: Option<usize>) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    let gz = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        parse_libsvm(BufReader::new(MultiGzDecoder::new(file)), dim_override)
    } else {
        parse_libsvm(BufReader::new(file), dim_override)
    }
}

pub fn write_libsvm<W: Write>(mut w: W, samples: &[SparseSample]) -> io::Result<()> {
    for s in samples {
        write!(w, "{}", if s.label == 1.0 { "+1" } else { "-1" })?;
        for &(i, v) in &s.features {
            write!(w, " {i}:{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Divides every feature by its largest absolute value over the dataset.
pub fn scale_max_abs(samples: &mut [SparseSample], dim: usize) {
    let mut max = vec![0.0f64; dim + 1];
    for s in samples.iter() {
        for &(i, v) in &s.features {
            max[i as usize] = max[i as usize].max(v.abs());
        }
    }
    for s in samples.iter_mut() {
        for (i, v) in s.features.iter_mut() {
            let m = max[*i as usize];
            if m > 0.0 {
                *v /= m;
            }
        }
    }
}

fn balanced_sizes(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(move |k| base + usize::from(k < extra))
}

/// Splits samples across agents.
///
/// `contiguous` and `label_skewed` cut consecutive blocks whose sizes differ
/// by at most one (label_skewed stable-sorts by label first); `round_robin`
/// deals sample `k` to agent `k mod n`. With `shuffle`, the samples are
/// permuted with the seeded generator before the rule is applied.
pub fn partition(
    samples: &[SparseSample],
    dim: usize,
    n_agents: usize,
    rule: PartitionRule,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Shard>, DataError> {
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    if n_agents == 0 || n_agents > samples.len() {
        return Err(DataError::TooManyAgents {
            agents: n_agents,
            samples: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(&mut rng::seeded(seed, stream::PARTITION));
    }
    let groups: Vec<Vec<usize>> = match rule {
        PartitionRule::RoundRobin => {
            let mut g = vec![Vec::new(); n_agents];
            for (k, &i) in order.iter().enumerate() {
                g[k % n_agents].push(i);
            }
            g
        }
        PartitionRule::Contiguous | PartitionRule::LabelSkewed => {
            if rule == PartitionRule::LabelSkewed {
                order.sort_by(|&a, &b| samples[a].label.total_cmp(&samples[b].label));
            }
            let mut start = 0;
            balanced_sizes(order.len(), n_agents)
                .map(|len| {
                    let g = order[start..start + len].to_vec();
                    start += len;
                    g
                })
                .collect()
        }
    };
    groups
        .into_iter()
        .map(|g| Shard::new(g.into_iter().map(|i| samples[i].clone()).collect(), dim))
        .collect()
}

/// Deterministic stand-in for `a9a` when the real file is not available:
/// 14 one-hot categorical groups over 123 binary features (the layout of
/// the UCI Adult encoding), labels drawn from a planted logistic model with
/// roughly a quarter positives.
pub fn synthetic_a9a_like(n_samples: usize, seed: u64) -> Dataset {
    const GROUPS: [usize; 14] = [5, 8, 16, 16, 7, 14, 6, 5, 2, 2, 2, 3, 5, 32];
    debug_assert_eq!(GROUPS.iter().sum::<usize>(), A9A_DIM);
    let mut rng = rng::seeded(seed, stream::SYNTHETIC_DATA);

    // Skewed category popularity and planted weights per feature.
    let mut popularity = Vec::with_capacity(A9A_DIM);
    let mut weights = Vec::with_capacity(A9A_DIM);
    for &g in &GROUPS {
        let raw: Vec<f64> = (0..g).map(|k| rng.random::<f64>() + 1.0 / (k as f64 + 1.0)).collect();
        let total: f64 = raw.iter().sum();
        popularity.extend(raw.iter().map(|r| r / total));
        weights.extend((0..g).map(|_| 1.6 * (rng.random::<f64>() - 0.5)));
    }
    let bias = -1.6;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut features = Vec::with_capacity(GROUPS.len());
        let mut offset = 0;
        let mut z = bias;
        for &g in &GROUPS {
            let mut t: f64 = rng.random();
            let mut pick = g - 1;
            for k in 0..g {
                t -= popularity[offset + k];
                if t <= 0.0 {
                    pick = k;
                    break;
                }
            }
            let idx = offset + pick;
            z += weights[idx];
            features.push((idx as u32 + 1, 1.0));
            offset += g;
        }
        let p = 1.0 / (1.0 + (-z).exp());
        let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        samples.push(SparseSample { label, features });
    }
    Dataset {
        samples,
        dim: A9A_DIM,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset, DataError> {
        parse_libsvm(text.as_bytes(), None)
    }

    #[test]
    fn parses_basic_lines() {
        let ds = parse("1 5:0.4 12:1\n-1 3:2.5\n").unwrap();
        assert_eq!(ds.samples[0].label, 1.0);
        assert_eq!(ds.samples[0].features, vec![(5, 0.4), (12, 1.0)]);
        assert_eq!(ds.samples[1].label, 0.0);
        assert_eq!(ds.dim, 12);
    }

    #[test]
    fn comments_blank_lines_and_plus_labels() {
        let ds = parse("# header\n\n+1 1:1 # trailing\n0 2:3\n").unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.samples[0].label, 1.0);
        assert_eq!(ds.samples[1].label, 0.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("1 1:1\n1 2-3\n", 2),
            ("1 3:1 2:1\n", 1),
            ("1 1:1\n1 1:1\nx 1:1\n", 3),
            ("1 a:1\n", 1),
            ("1 1:zz\n", 1),
            ("1 0:1\n", 1),
            ("2 1:1\n", 1),
        ];
        for (text, want) in cases {
            match parse(text) {
                Err(DataError::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn dim_override() {
        assert_eq!(parse_libsvm("1 5:1\n".as_bytes(), Some(123)).unwrap().dim, 123);
        assert!(parse_libsvm("1 5:1\n".as_bytes(), Some(4)).is_err());
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.svm.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::default());
        enc.write_all(b"1 1:1 3:0.5\n-1 2:2\n").unwrap();
        enc.finish().unwrap();
        let ds = load_libsvm(&path, None).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.dim, 3);
    }

    fn toy(n: usize) -> Vec<SparseSample> {
        (0..n)
            .map(|i| SparseSample {
                label: (i % 3 == 0) as u8 as f64,
                features: vec![(1, i as f64)],
            })
            .collect()
    }

    fn sizes(shards: &[Shard]) -> Vec<usize> {
        shards.iter().map(Shard::len).collect()
    }

    #[test]
    fn partition_sizes() {
        let s = toy(10);
        assert_eq!(sizes(&partition(&s, 1, 5, PartitionRule::Contiguous, false, 0).unwrap()), vec![2; 5]);
        let s = toy(7);
        assert_eq!(
            sizes(&partition(&s, 1, 3, PartitionRule::RoundRobin, false, 0).unwrap()),
            vec![3, 2, 2]
        );
        assert!(matches!(
            partition(&s, 1, 8, PartitionRule::Contiguous, false, 0),
            Err(DataError::TooManyAgents { .. })
        ));
    }

    #[test]
    fn a9a_sized_contiguous_split_is_balanced() {
        let sizes: Vec<usize> = balanced_sizes(A9A_SAMPLES, 5).collect();
        assert_eq!(sizes, vec![6513, 6512, 6512, 6512, 6512]);
    }

    #[test]
    fn label_skewed_groups_labels() {
        let s = toy(9);
        let shards = partition(&s, 1, 3, PartitionRule::LabelSkewed, false, 0).unwrap();
        assert!(shards[0].samples().iter().all(|x| x.label == 0.0));
        assert!(shards[2].samples().iter().all(|x| x.label == 1.0));
    }

    #[test]
    fn synthetic_shape() {
        let ds = synthetic_a9a_like(2000, 1);
        assert_eq!(ds.dim, A9A_DIM);
        assert!(ds.samples.iter().all(|s| s.features.len() == 14 && s.max_index() as usize <= A9A_DIM));
        let pos = ds.samples.iter().filter(|s| s.label == 1.0).count() as f64 / 2000.0;
        assert!(pos > 0.1 && pos < 0.5, "positive rate {pos}");
        assert_eq!(ds, synthetic_a9a_like(2000, 1));
    }

    fn arb_sample() -> impl Strategy<Value = SparseSample> {
        (
            any::<bool>(),
            proptest::collection::btree_map(1u32..200, -1e6f64..1e6, 0..12),
        )
            .prop_map(|(pos, feats)| SparseSample {
                label: pos as u8 as f64,
                features: feats.into_iter().collect(),
            })
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(samples in proptest::collection::vec(arb_sample(), 1..30)) {
            let mut buf = Vec::new();
            write_libsvm(&mut buf, &samples).unwrap();
            let ds = parse_libsvm(buf.as_slice(), Some(200)).unwrap();
            prop_assert_eq!(ds.samples, samples);
        }

        #[test]
        fn shards_cover_disjointly(
            n in 1usize..60,
            agents in 1usize..8,
            rule in prop_oneof![
                Just(PartitionRule::Contiguous),
                Just(PartitionRule::RoundRobin),
                Just(PartitionRule::LabelSkewed)
            ],
            shuffle in any::<bool>(),
            seed in any::<u64>(),
        ) {
            prop_assume!(agents <= n);
            let s = toy(n);
            let shards = partition(&s, 1, agents, rule, shuffle, seed).unwrap();
            let mut seen: Vec<usize> = shards
                .iter()
                .flat_map(|sh| sh.samples().iter().map(|x| x.features[0].1 as usize))
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let sz = sizes(&shards);
            prop_assert!(sz.iter().max().unwrap() - sz.iter().min().unwrap() <= 1);
        }
    }
}
