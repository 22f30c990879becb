//! The Signal-Interfered IQ (SIIQ) corpus.
//!
//! Equalized blocks become A×A feature maps (real halves stacked over
//! imaginary halves), labeled by quantizing the block's realized SINR into
//! five classes. The corpus is partitioned into an interference-free retain
//! set, an interference-corrupted forget set, and one test set per evaluation
//! case. Serialization is bit-exact: a binary container plus an adjacent JSON
//! manifest that documents how every sample was generated.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{transmit_block, BlockConfig, ComplexSequence};
use crate::rng::{substream, PRNG_ID};

/// Side length A of a feature map; the first convolution (3×3, valid) must
/// produce 26×26, which pins the input at 28×28.
pub const MAP_SIZE: usize = 28;
/// Number of SINR classes.
pub const CLASS_COUNT: usize = 5;
/// Complex samples per block: 2·T real values fill one A×A map.
pub const SYMBOLS_PER_MAP: usize = MAP_SIZE * MAP_SIZE / 2;
/// Nominal per-class SNR levels in dB, drawn uniformly during generation.
pub const NOMINAL_SNR_LEVELS_DB: [f64; CLASS_COUNT] = [0.0, 5.0, 10.0, 15.0, 20.0];
/// Class bin edges in dB, at the midpoints between nominal levels.
pub const CLASS_EDGES_DB: [f64; CLASS_COUNT - 1] = [2.5, 7.5, 12.5, 17.5];
/// Canonical AWGN variance σ².
pub const CANONICAL_NOISE_VARIANCE: f64 = 1.0;

/// Binary container version written by [`save`].
pub const FORMAT_VERSION: u16 = 1;
const MAGIC: [u8; 4] = *b"SIIQ";

/// Which partition a map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Retain,
    Forget,
    Test,
}

impl Membership {
    fn to_u8(self) -> u8 {
        match self {
            Membership::Retain => 0,
            Membership::Forget => 1,
            Membership::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Membership::Retain),
            1 => Ok(Membership::Forget),
            2 => Ok(Membership::Test),
            other => Err(Error::InvalidConfig(format!("unknown membership tag {other}"))),
        }
    }
}

/// One A×A feature map with its class label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct IQMap {
    /// Row-major A×A grid; rows 0..A/2 are I samples, rows A/2..A are Q.
    pub grid: Vec<f64>,
    pub label: u8,
    pub membership: Membership,
    pub realized_sinr_db: f64,
}

/// Generation recipe for one evaluation case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseConfig {
    pub name: String,
    /// Total users N; offsets list one entry per interferer (N−1).
    pub user_count: usize,
    pub interferer_offsets_db: Vec<f64>,
    /// Fraction of the case's samples exposed to the interferers.
    pub interfered_fraction: f64,
    pub sample_count: usize,
}

impl CaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.user_count < 1 {
            return Err(Error::InvalidConfig(format!("case `{}`: user_count must be >= 1", self.name)));
        }
        if self.interferer_offsets_db.len() != self.user_count - 1 {
            return Err(Error::InvalidConfig(format!(
                "case `{}`: {} offsets for {} users",
                self.name,
                self.interferer_offsets_db.len(),
                self.user_count
            )));
        }
        if !(0.0..=1.0).contains(&self.interfered_fraction) {
            return Err(Error::InvalidConfig(format!(
                "case `{}`: interfered_fraction {} outside [0,1]",
                self.name, self.interfered_fraction
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig(format!("case `{}`: sample_count must be > 0", self.name)));
        }
        Ok(())
    }
}

/// Training-corpus sizes and the forget set's interference severity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSetConfig {
    pub retain_count: usize,
    pub forget_count: usize,
    pub forget_offsets_db: Vec<f64>,
}

impl TrainSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retain_count == 0 || self.forget_count == 0 {
            return Err(Error::InvalidConfig("retain/forget counts must be > 0".into()));
        }
        Ok(())
    }
}

/// Canonical training-set configuration: 3125 clean retain samples and 625
/// forget samples corrupted by one strong (−4 dB) interferer.
pub fn canonical_train_config() -> TrainSetConfig {
    TrainSetConfig {
        retain_count: 3125,
        forget_count: 625,
        forget_offsets_db: vec![-4.0],
    }
}

/// The four canonical evaluation cases. Each test set holds 625 samples so
/// membership-inference folds stay balanced against the forget set.
pub fn canonical_cases() -> Vec<CaseConfig> {
    vec![
        CaseConfig {
            name: "case1".into(),
            user_count: 2,
            interferer_offsets_db: vec![-12.0],
            interfered_fraction: 1.0 / 6.0,
            sample_count: 625,
        },
        CaseConfig {
            name: "case2".into(),
            user_count: 2,
            interferer_offsets_db: vec![-4.0],
            interfered_fraction: 1.0 / 6.0,
            sample_count: 625,
        },
        CaseConfig {
            name: "case3".into(),
            user_count: 3,
            interferer_offsets_db: vec![-4.0, -4.0],
            interfered_fraction: 1.0,
            sample_count: 625,
        },
        CaseConfig {
            name: "case4".into(),
            user_count: 1,
            interferer_offsets_db: vec![],
            interfered_fraction: 0.0,
            sample_count: 625,
        },
    ]
}

/// Everything needed to regenerate or audit a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub prng_id: String,
    pub master_seed: u64,
    pub map_size: u16,
    pub class_count: u8,
    pub class_edges_db: Vec<f64>,
    pub nominal_snr_levels_db: Vec<f64>,
    pub noise_variance: f64,
    /// Map count per partition, keyed by partition name.
    pub partition_counts: BTreeMap<String, usize>,
    /// Half-open global block-index range per partition; ranges are disjoint,
    /// which makes every map's (seed, block index) provenance unique.
    pub block_index_ranges: BTreeMap<String, (u64, u64)>,
    pub train_config: TrainSetConfig,
    pub case_configs: Vec<CaseConfig>,
}

/// The partitioned corpus.
#[derive(Debug, Clone)]
pub struct SiiqDataset {
    pub retain: Vec<IQMap>,
    pub forget: Vec<IQMap>,
    /// Per-case test sets in generation order.
    pub tests: Vec<(String, Vec<IQMap>)>,
    pub manifest: Manifest,
}

impl SiiqDataset {
    pub fn test_set(&self, name: &str) -> Option<&[IQMap]> {
        self.tests.iter().find(|(n, _)| n == name).map(|(_, m)| m.as_slice())
    }

    fn partition_order(&self) -> Vec<(String, &[IQMap])> {
        let mut parts: Vec<(String, &[IQMap])> = vec![
            ("retain".into(), self.retain.as_slice()),
            ("forget".into(), self.forget.as_slice()),
        ];
        for (name, maps) in &self.tests {
            parts.push((format!("test:{name}"), maps.as_slice()));
        }
        parts
    }
}

/// Reshape an equalized block into one A×A map: rows 0..A/2 take the real
/// parts row-major, rows A/2..A the imaginary parts.
pub fn blocks_to_map(equalized: &ComplexSequence, a: usize) -> Result<Vec<f64>> {
    let expected = a * a / 2;
    if equalized.len() != expected {
        return Err(Error::ShapeMismatch {
            context: "blocks_to_map",
            expected: format!("{expected} complex samples for a {a}x{a} map"),
            found: format!("{}", equalized.len()),
        });
    }
    let mut grid = vec![0.0; a * a];
    grid[..expected].copy_from_slice(&equalized.re);
    grid[expected..].copy_from_slice(&equalized.im);
    Ok(grid)
}

/// Inverse of [`blocks_to_map`].
pub fn map_to_sequence(grid: &[f64], a: usize) -> Result<ComplexSequence> {
    if grid.len() != a * a {
        return Err(Error::ShapeMismatch {
            context: "map_to_sequence",
            expected: format!("{} grid values", a * a),
            found: format!("{}", grid.len()),
        });
    }
    let half = a * a / 2;
    Ok(ComplexSequence {
        re: grid[..half].to_vec(),
        im: grid[half..].to_vec(),
    })
}

/// Bin a realized SINR into a class index: the count of edges at or below it,
/// so a value exactly on an edge belongs to the upper bin.
pub fn quantize_label(sinr_db: f64, class_edges_db: &[f64]) -> usize {
    debug_assert!(class_edges_db.windows(2).all(|w| w[0] < w[1]), "edges must be strictly increasing");
    class_edges_db.iter().filter(|&&e| e <= sinr_db).count()
}

fn generate_map(
    master_seed: u64,
    block_index: u64,
    offsets_db: &[f64],
    membership: Membership,
) -> Result<IQMap> {
    let mut rng = substream(master_seed, "block", block_index);
    let level = NOMINAL_SNR_LEVELS_DB[rng.gen_range(0..CLASS_COUNT)];
    let cfg = BlockConfig {
        symbols_per_block: SYMBOLS_PER_MAP,
        desired_snr_db: level,
        interferer_offsets_db: offsets_db.to_vec(),
        noise_variance: CANONICAL_NOISE_VARIANCE,
    };
    let block = transmit_block(&mut rng, &cfg)?;
    let grid = blocks_to_map(&block.equalized, MAP_SIZE)?;
    let label = quantize_label(block.realized_sinr_db, &CLASS_EDGES_DB) as u8;
    Ok(IQMap {
        grid,
        label,
        membership,
        realized_sinr_db: block.realized_sinr_db,
    })
}

/// Pick which sample indices of a test set are interfered: an exact
/// `round(n·fraction)` count, chosen by a seeded shuffle.
fn interfered_indices(master_seed: u64, case_index: u64, n: usize, fraction: f64) -> Vec<bool> {
    let k = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(master_seed, "case-interfered", case_index);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut flags = vec![false; n];
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
    flags
}

/// Generate the full corpus from a master seed. Retain maps are
/// interference-free; forget maps carry the training interferers; each case
/// test set exposes its configured fraction of samples to its offsets.
/// Labels always come from the realized SINR. Maps are generated in parallel
/// from per-block substreams, so the result is a pure function of the inputs.
pub fn generate_corpus(
    train_cfg: &TrainSetConfig,
    case_cfgs: &[CaseConfig],
    master_seed: u64,
) -> Result<SiiqDataset> {
    train_cfg.validate()?;
    for c in case_cfgs {
        c.validate()?;
    }

    let mut next_index = 0u64;
    let mut ranges = BTreeMap::new();
    let mut take_range = |name: &str, count: usize| {
        let start = next_index;
        next_index += count as u64;
        ranges.insert(name.to_string(), (start, next_index));
        start
    };

    let retain_start = take_range("retain", train_cfg.retain_count);
    let retain: Vec<IQMap> = (0..train_cfg.retain_count)
        .into_par_iter()
        .map(|i| generate_map(master_seed, retain_start + i as u64, &[], Membership::Retain))
        .collect::<Result<_>>()?;

    let forget_start = take_range("forget", train_cfg.forget_count);
    let forget: Vec<IQMap> = (0..train_cfg.forget_count)
        .into_par_iter()
        .map(|i| {
            generate_map(
                master_seed,
                forget_start + i as u64,
                &train_cfg.forget_offsets_db,
                Membership::Forget,
            )
        })
        .collect::<Result<_>>()?;

    let mut tests = Vec::with_capacity(case_cfgs.len());
    for (case_idx, case) in case_cfgs.iter().enumerate() {
        let start = take_range(&format!("test:{}", case.name), case.sample_count);
        let flags = interfered_indices(master_seed, case_idx as u64, case.sample_count, case.interfered_fraction);
        let maps: Vec<IQMap> = (0..case.sample_count)
            .into_par_iter()
            .map(|i| {
                let offsets: &[f64] = if flags[i] { &case.interferer_offsets_db } else { &[] };
                generate_map(master_seed, start + i as u64, offsets, Membership::Test)
            })
            .collect::<Result<_>>()?;
        tests.push((case.name.clone(), maps));
    }

    let mut partition_counts = BTreeMap::new();
    partition_counts.insert("retain".to_string(), retain.len());
    partition_counts.insert("forget".to_string(), forget.len());
    for (name, maps) in &tests {
        partition_counts.insert(format!("test:{name}"), maps.len());
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        prng_id: PRNG_ID.to_string(),
        master_seed,
        map_size: MAP_SIZE as u16,
        class_count: CLASS_COUNT as u8,
        class_edges_db: CLASS_EDGES_DB.to_vec(),
        nominal_snr_levels_db: NOMINAL_SNR_LEVELS_DB.to_vec(),
        noise_variance: CANONICAL_NOISE_VARIANCE,
        partition_counts,
        block_index_ranges: ranges,
        train_config: train_cfg.clone(),
        case_configs: case_cfgs.to_vec(),
    };

    Ok(SiiqDataset {
        retain,
        forget,
        tests,
        manifest,
    })
}

/// Path of the JSON manifest written next to a corpus file.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// Write the corpus container and its adjacent manifest.
pub fn save(dataset: &SiiqDataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u16::<LittleEndian>(dataset.manifest.map_size)?;
    w.write_u8(dataset.manifest.class_count)?;

    let parts = dataset.partition_order();
    w.write_u32::<LittleEndian>(parts.len() as u32)?;
    for (name, maps) in &parts {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u64::<LittleEndian>(maps.len() as u64)?;
    }
    for (_, maps) in &parts {
        for m in *maps {
            w.write_u8(m.label)?;
            w.write_u8(m.membership.to_u8())?;
            w.write_f64::<LittleEndian>(m.realized_sinr_db)?;
            for &v in &m.grid {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;

    let manifest_file = File::create(manifest_path(path))?;
    let mut mw = BufWriter::new(manifest_file);
    serde_json::to_writer_pretty(&mut mw, &dataset.manifest)?;
    mw.write_all(b"\n")?;
    mw.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated(what))
}

/// Load a corpus, verifying magic, version, and that the header, payload, and
/// manifest all agree on the per-partition counts.
pub fn load(path: &Path) -> Result<SiiqDataset> {
    let manifest_file = File::open(manifest_path(path))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(manifest_file))?;

    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| Error::Truncated("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let map_size = r.read_u16::<LittleEndian>().map_err(|_| Error::Truncated("map size"))? as usize;
    let class_count = r.read_u8().map_err(|_| Error::Truncated("class count"))?;
    if map_size != manifest.map_size as usize || class_count != manifest.class_count {
        return Err(Error::InvalidConfig(format!(
            "header (A={map_size}, C={class_count}) disagrees with manifest (A={}, C={})",
            manifest.map_size, manifest.class_count
        )));
    }

    let part_count = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated("partition table"))?;
    let mut table = Vec::with_capacity(part_count as usize);
    for _ in 0..part_count {
        let name_len = r.read_u16::<LittleEndian>().map_err(|_| Error::Truncated("partition name"))?;
        let mut name = vec![0u8; name_len as usize];
        read_exact_or_truncated(&mut r, &mut name, "partition name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::InvalidConfig("partition name is not UTF-8".into()))?;
        let count = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated("partition count"))?;
        table.push((name, count as usize));
    }

    for (name, count) in &table {
        match manifest.partition_counts.get(name) {
            Some(&m) if m == *count => {}
            Some(&m) => {
                return Err(Error::CountMismatch {
                    what: format!("partition `{name}`"),
                    expected: m,
                    found: *count,
                })
            }
            None => {
                return Err(Error::CountMismatch {
                    what: format!("partition `{name}` missing from manifest"),
                    expected: 0,
                    found: *count,
                })
            }
        }
    }
    if table.len() != manifest.partition_counts.len() {
        return Err(Error::CountMismatch {
            what: "partition table".into(),
            expected: manifest.partition_counts.len(),
            found: table.len(),
        });
    }

    let grid_len = map_size * map_size;
    let mut partitions: Vec<(String, Vec<IQMap>)> = Vec::with_capacity(table.len());
    for (name, count) in &table {
        let mut maps = Vec::with_capacity(*count);
        for _ in 0..*count {
            let label = r.read_u8().map_err(|_| Error::Truncated("map record"))?;
            let membership = Membership::from_u8(r.read_u8().map_err(|_| Error::Truncated("map record"))?)?;
            let sinr = r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated("map record"))?;
            let mut grid = vec![0.0; grid_len];
            for v in grid.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated("grid values"))?;
            }
            maps.push(IQMap {
                grid,
                label,
                membership,
                realized_sinr_db: sinr,
            });
        }
        partitions.push((name.clone(), maps));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CountMismatch {
            what: "trailing bytes after final record".into(),
            expected: 0,
            found: 1,
        });
    }

    let mut retain = Vec::new();
    let mut forget = Vec::new();
    let mut tests = Vec::new();
    for (name, maps) in partitions {
        if name == "retain" {
            retain = maps;
        } else if name == "forget" {
            forget = maps;
        } else if let Some(case) = name.strip_prefix("test:") {
            tests.push((case.to_string(), maps));
        } else {
            return Err(Error::InvalidConfig(format!("unknown partition `{name}`")));
        }
    }

    Ok(SiiqDataset {
        retain,
        forget,
        tests,
        manifest,
    })
}
