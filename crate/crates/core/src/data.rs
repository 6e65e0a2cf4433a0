//! JSONL dataset records, deterministic splits and the synthetic scene
//! generator.
//!
//! A dataset directory holds `queries.jsonl` (one [`QueryRecord`] per line),
//! `images.jsonl` (one [`ImageRecord`] per line, the gallery served by the
//! completion service) and `classes.txt` (one instance class per line).

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{ClassCatalog, InstanceError, InstanceExample};
use crate::tensor::Rng;
use crate::train::LmExample;
use crate::vocab::Vocab;

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: unknown instance class {class:?}")]
    UnknownClass { line: usize, class: String },
    #[error(transparent)]
    Catalog(#[from] InstanceError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One `(context features, query, referred instances)` example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub features: Vec<f32>,
    pub query: String,
    pub instances: Vec<String>,
}

/// One gallery image: its features and the classes present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub features: Vec<f32>,
    pub instances: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownClassPolicy {
    /// Drop records that mention a class outside the catalog.
    Skip,
    #[default]
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadConfig {
    pub max_len: usize,
    /// Expected feature length. When `None`, the first record fixes it.
    pub feature_dim: Option<usize>,
    pub unknown_class: UnknownClassPolicy,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            max_len: 50,
            feature_dim: None,
            unknown_class: UnknownClassPolicy::Fail,
        }
    }
}

/// Reads and validates a query file. Line numbers in errors are 1-based;
/// blank lines are ignored.
pub fn load_dataset(path: &Path, catalog: &ClassCatalog, cfg: &LoadConfig) -> Result<Vec<QueryRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_records(BufReader::new(file), catalog, cfg).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_records<R: BufRead>(reader: R, catalog: &ClassCatalog, cfg: &LoadConfig) -> Result<Vec<QueryRecord>> {
    let mut feature_dim = cfg.feature_dim;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(Path::new("<reader>")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |reason: String| DataError::Invalid { line: line_no, reason };
        let len = rec.query.chars().count();
        if len == 0 {
            return Err(invalid("query is empty".into()));
        }
        if len > cfg.max_len {
            return Err(invalid(format!(
                "query has {len} characters, max_len is {}",
                cfg.max_len
            )));
        }
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features contain a non-finite value".into()));
        }
        match feature_dim {
            Some(d) if d != rec.features.len() => {
                return Err(invalid(format!("expected {d} features, found {}", rec.features.len())))
            }
            None => feature_dim = Some(rec.features.len()),
            _ => {}
        }
        if let Some(unknown) = rec.instances.iter().find(|c| !catalog.contains(c)) {
            match cfg.unknown_class {
                UnknownClassPolicy::Skip => {
                    log::warn!("line {line_no}: skipping record with unknown class {unknown:?}");
                    continue;
                }
                UnknownClassPolicy::Fail => {
                    return Err(DataError::UnknownClass {
                        line: line_no,
                        class: unknown.clone(),
                    })
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn save_dataset(path: &Path, records: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn save_images(path: &Path, images: &[ImageRecord]) -> Result<()> {
    write_jsonl(path, images)
}

pub fn load_images(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid {
                line: i + 1,
                reason: "features contain a non-finite value".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_classes(path: &Path) -> Result<ClassCatalog> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let names = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Ok(ClassCatalog::new(names)?)
}

pub fn save_classes(path: &Path, catalog: &ClassCatalog) -> Result<()> {
    let mut text = catalog.names().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub const TRAIN_FRACTION: f64 = 0.85;
pub const VAL_FRACTION: f64 = 0.075;

/// Uniform value in `[0, 1)` from FNV-1a over the seed and id, finished with
/// a SplitMix64 mix.
pub fn split_hash(id: &str, seed: u64) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_of(id: &str, seed: u64) -> Split {
    let u = split_hash(id, seed);
    if u < TRAIN_FRACTION {
        Split::Train
    } else if u < TRAIN_FRACTION + VAL_FRACTION {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<QueryRecord>,
    pub val: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

pub fn split_records(records: Vec<QueryRecord>, seed: u64) -> Splits {
    let mut s = Splits::default();
    for r in records {
        match split_of(&r.id, seed) {
            Split::Train => s.train.push(r),
            Split::Val => s.val.push(r),
            Split::Test => s.test.push(r),
        }
    }
    s
}

/// Language-model examples; characters outside `vocab` become `<UNK>`.
pub fn lm_examples(records: &[QueryRecord], vocab: &Vocab) -> Vec<LmExample> {
    records
        .iter()
        .map(|r| LmExample {
            tokens: vocab.encode_query(&r.query),
            features: r.features.clone(),
        })
        .collect()
}

pub fn instance_examples(
    records: &[QueryRecord],
    vocab: &Vocab,
    catalog: &ClassCatalog,
) -> Result<Vec<InstanceExample>> {
    records
        .iter()
        .map(|r| {
            Ok(InstanceExample {
                tokens: vocab.encode_lossy(&r.query),
                labels: catalog.label_vector(&r.instances)?,
            })
        })
        .collect()
}

/// Object classes of the synthetic world with their attribute pools. Only
/// `bottle` can be `wine`, so a model that sees the image can finish
/// "wine b" while a context-free model cannot do better than the corpus
/// prior on everything else.
pub const SYNTHETIC_CLASSES: [(&str, [&str; 3]); 16] = [
    ("bottle", ["wine", "green", "glass"]),
    ("table", ["wooden", "round", "white"]),
    ("chair", ["wooden", "red", "folding"]),
    ("cup", ["coffee", "white", "blue"]),
    ("plate", ["white", "round", "empty"]),
    ("lamp", ["tall", "yellow", "black"]),
    ("book", ["open", "red", "thick"]),
    ("window", ["open", "round", "tall"]),
    ("dog", ["brown", "black", "small"]),
    ("cat", ["black", "white", "small"]),
    ("car", ["red", "blue", "parked"]),
    ("tree", ["tall", "green", "small"]),
    ("shirt", ["blue", "striped", "white"]),
    ("bag", ["leather", "brown", "small"]),
    ("clock", ["round", "wall", "black"]),
    ("phone", ["black", "small", "white"]),
];

pub const SYNTHETIC_PREPOSITIONS: [&str; 3] = ["on", "near", "by"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    pub queries_per_scene: usize,
    pub noise_sigma: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            queries_per_scene: 3,
            noise_sigma: 0.1,
            min_objects: 2,
            max_objects: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: String,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub objects: Vec<SceneObject>,
    pub features: Vec<f32>,
}

impl SyntheticScene {
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.objects.iter().map(|o| o.class.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub catalog: ClassCatalog,
    pub scenes: Vec<SyntheticScene>,
    pub queries: Vec<QueryRecord>,
}

/// All attributes across classes, sorted.
pub fn synthetic_attributes() -> Vec<&'static str> {
    let set: BTreeSet<&str> = SYNTHETIC_CLASSES.iter().flat_map(|(_, a)| a.iter().copied()).collect();
    set.into_iter().collect()
}

/// Feature length of generated scenes: class presence then attribute presence.
pub fn synthetic_feature_dim() -> usize {
    SYNTHETIC_CLASSES.len() + synthetic_attributes().len()
}

pub fn gen_synthetic(cfg: &SyntheticConfig, rng: &mut Rng) -> SyntheticDataset {
    let attributes = synthetic_attributes();
    let n_classes = SYNTHETIC_CLASSES.len();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("sigma is non-negative");
    let catalog = ClassCatalog::new(SYNTHETIC_CLASSES.iter().map(|(c, _)| c.to_string()).collect())
        .expect("class names are unique");
    let lo = cfg.min_objects.clamp(1, n_classes);
    let hi = cfg.max_objects.clamp(lo, n_classes);

    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut queries = Vec::with_capacity(cfg.n_scenes * cfg.queries_per_scene);
    for s in 0..cfg.n_scenes {
        let n_obj = rng.random_range(lo..=hi);
        let picks = rand::seq::index::sample(rng, n_classes, n_obj).into_vec();
        let objects: Vec<SceneObject> = picks
            .iter()
            .map(|&ci| {
                let (class, pool) = SYNTHETIC_CLASSES[ci];
                SceneObject {
                    class: class.to_string(),
                    attribute: pool.choose(rng).expect("pool is non-empty").to_string(),
                }
            })
            .collect();

        let mut features = vec![0.0f32; n_classes + attributes.len()];
        for (o, &ci) in objects.iter().zip(&picks) {
            features[ci] = 1.0;
            let ai = attributes
                .binary_search(&o.attribute.as_str())
                .expect("attribute is listed");
            features[n_classes + ai] = 1.0;
        }
        for v in features.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
        let id = format!("scene-{s:06}");

        for q in 0..cfg.queries_per_scene {
            let (query, mentioned) = synthetic_query(&objects, rng);
            queries.push(QueryRecord {
                id: format!("{id}/q{q}"),
                features: features.clone(),
                query,
                instances: mentioned,
            });
        }
        scenes.push(SyntheticScene { id, objects, features });
    }
    SyntheticDataset {
        catalog,
        scenes,
        queries,
    }
}

fn synthetic_query(objects: &[SceneObject], rng: &mut Rng) -> (String, Vec<String>) {
    let i = rng.random_range(0..objects.len());
    let o = &objects[i];
    let other = {
        let j = (i + rng.random_range(1..objects.len().max(2))) % objects.len();
        (j != i).then(|| &objects[j])
    };
    let prep = SYNTHETIC_PREPOSITIONS.choose(rng).expect("non-empty");
    let template = rng.random_range(0..5);
    match (template, other) {
        (1, Some(b)) => (
            format!("{} {} {prep} {}", o.attribute, o.class, b.class),
            vec![o.class.clone(), b.class.clone()],
        ),
        (4, Some(b)) => (
            format!("{} {prep} {}", o.class, b.class),
            vec![o.class.clone(), b.class.clone()],
        ),
        (2, _) => (format!("{} is {}", o.class, o.attribute), vec![o.class.clone()]),
        (3, _) => (format!("the {} {}", o.attribute, o.class), vec![o.class.clone()]),
        _ => (format!("{} {}", o.attribute, o.class), vec![o.class.clone()]),
    }
}

impl SyntheticDataset {
    pub fn images(&self) -> Vec<ImageRecord> {
        self.scenes
            .iter()
            .map(|s| ImageRecord {
                id: s.id.clone(),
                features: s.features.clone(),
                instances: s.classes(),
            })
            .collect()
    }

    /// Writes `queries.jsonl`, `images.jsonl` and `classes.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_dataset(&dir.join(QUERIES_FILE), &self.queries)?;
        save_images(&dir.join(IMAGES_FILE), &self.images())?;
        save_classes(&dir.join(CLASSES_FILE), &self.catalog)
    }
}

/// Everything in a dataset directory, split and validated.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub catalog: ClassCatalog,
    pub splits: Splits,
    pub images: Vec<ImageRecord>,
}

impl DatasetDir {
    pub fn load(dir: &Path, cfg: &LoadConfig, split_seed: u64) -> Result<Self> {
        let catalog = load_classes(&dir.join(CLASSES_FILE))?;
        let records = load_dataset(&dir.join(QUERIES_FILE), &catalog, cfg)?;
        let images_path = dir.join(IMAGES_FILE);
        let images = if images_path.exists() {
            load_images(&images_path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            catalog,
            splits: split_records(records, split_seed),
            images,
        })
    }
}

/// Writes JSONL to any sink; used for streaming output.
pub fn write_records<W: Write>(mut w: W, records: &[QueryRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    fn catalog() -> ClassCatalog {
        ClassCatalog::new(vec!["bottle".into(), "table".into()]).unwrap()
    }

    fn read(text: &str, cfg: &LoadConfig) -> Result<Vec<QueryRecord>> {
        read_records(text.as_bytes(), &catalog(), cfg)
    }

    #[test]
    fn empty_input_is_valid() {
        assert!(read("", &LoadConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn two_instance_record_round_trips() {
        let rec = QueryRecord {
            id: "a".into(),
            features: vec![0.25, -1.5e-3],
            query: "wine bottle on table".into(),
            instances: vec!["bottle".into(), "table".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        save_dataset(&path, std::slice::from_ref(&rec)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"id\":\"a\",\"features\":[0.25,-0.0015],\"query\":\"wine bottle on table\",\"instances\":[\"bottle\",\"table\"]}\n"
        );
        let loaded = load_dataset(&path, &catalog(), &LoadConfig::default()).unwrap();
        assert_eq!(loaded, vec![rec]);
        save_dataset(&path, &loaded).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), text);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = r#"{"id":"a","features":[1],"query":"cup","instances":[]}"#;
        let cfg = LoadConfig::default();
        let err = read(&format!("{good}\n{{not json\n"), &cfg).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");

        let empty = r#"{"id":"b","features":[1],"query":"","instances":[]}"#;
        assert!(matches!(
            read(&format!("{good}\n\n{empty}"), &cfg),
            Err(DataError::Invalid { line: 3, .. })
        ));

        let dims = r#"{"id":"b","features":[1,2],"query":"x","instances":[]}"#;
        assert!(matches!(
            read(&format!("{good}\n{dims}"), &cfg),
            Err(DataError::Invalid { line: 2, .. })
        ));

        let long = format!(
            r#"{{"id":"b","features":[1],"query":"{}","instances":[]}}"#,
            "x".repeat(51)
        );
        assert!(matches!(read(&long, &cfg), Err(DataError::Invalid { line: 1, .. })));
    }

    #[test]
    fn unknown_class_policy() {
        let text = "{\"id\":\"a\",\"features\":[1],\"query\":\"dog\",\"instances\":[\"dog\"]}\n\
                    {\"id\":\"b\",\"features\":[1],\"query\":\"bottle\",\"instances\":[\"bottle\"]}\n";
        let err = read(text, &LoadConfig::default()).unwrap_err();
        assert!(matches!(err, DataError::UnknownClass { line: 1, ref class } if class == "dog"));
        let cfg = LoadConfig {
            unknown_class: UnknownClassPolicy::Skip,
            ..LoadConfig::default()
        };
        let recs = read(text, &cfg).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, "b");
    }

    #[test]
    fn split_fractions_on_10k_ids() {
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            match split_of(&format!("record-{i}"), 17) {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        let f: Vec<f64> = counts.iter().map(|&c| c as f64 / 10_000.0).collect();
        assert!((f[0] - 0.85).abs() < 0.01, "{f:?}");
        assert!((f[1] - 0.075).abs() < 0.01, "{f:?}");
        assert!((f[2] - 0.075).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn synthetic_queries_mention_present_objects() {
        let ds = gen_synthetic(
            &SyntheticConfig {
                n_scenes: 300,
                ..Default::default()
            },
            &mut seeded_rng(4),
        );
        assert_eq!(ds.queries.len(), 900);
        for (i, q) in ds.queries.iter().enumerate() {
            let scene = &ds.scenes[i / 3];
            let present = scene.classes();
            assert!(!q.instances.is_empty());
            for inst in &q.instances {
                assert!(present.contains(inst), "{inst} not in {present:?}");
                assert!(q.query.contains(inst.as_str()));
            }
            assert!(q.query.chars().count() <= 50);
            assert_eq!(q.features.len(), synthetic_feature_dim());
        }
    }

    #[test]
    fn synthetic_alphabet_is_small() {
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for (c, pool) in SYNTHETIC_CLASSES {
            chars.extend(c.chars());
            pool.iter().for_each(|a| chars.extend(a.chars()));
        }
        for p in SYNTHETIC_PREPOSITIONS.iter().chain(&["is", "the", " "]) {
            chars.extend(p.chars());
        }
        assert!(chars.len() <= 40);
        let ds = gen_synthetic(
            &SyntheticConfig {
                n_scenes: 500,
                ..Default::default()
            },
            &mut seeded_rng(1),
        );
        let vocab = Vocab::from_corpus(ds.queries.iter().map(|q| q.query.as_str()));
        assert!(vocab.len() - crate::vocab::NUM_SPECIALS <= chars.len());
    }

    #[test]
    fn only_bottles_are_wine() {
        let ds = gen_synthetic(
            &SyntheticConfig {
                n_scenes: 400,
                ..Default::default()
            },
            &mut seeded_rng(2),
        );
        for q in &ds.queries {
            if q.query.contains("wine ") {
                assert!(q.query.contains("wine bottle"), "{}", q.query);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig {
            n_scenes: 50,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_synthetic(&cfg, &mut seeded_rng(8)).write_to(a.path()).unwrap();
        gen_synthetic(&cfg, &mut seeded_rng(8)).write_to(b.path()).unwrap();
        for f in [QUERIES_FILE, IMAGES_FILE, CLASSES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let loaded = DatasetDir::load(a.path(), &LoadConfig::default(), 0).unwrap();
        assert_eq!(loaded.images.len(), 50);
        let n = loaded.splits.train.len() + loaded.splits.val.len() + loaded.splits.test.len();
        assert_eq!(n, 150);
    }

    proptest! {
        #[test]
        fn split_is_a_pure_function(id in "[a-z0-9/-]{1,20}", seed in any::<u64>()) {
            let u = split_hash(&id, seed);
            prop_assert!((0.0..1.0).contains(&u));
            prop_assert_eq!(split_of(&id, seed), split_of(&id, seed));
        }

        #[test]
        fn records_round_trip_through_json(
            id in "[a-z0-9]{1,8}",
            query in "[a-z ]{1,20}",
            features in proptest::collection::vec(-1e3f32..1e3, 0..5),
        ) {
            let rec = QueryRecord { id, features, query, instances: vec!["table".into()] };
            let mut buf = Vec::new();
            write_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = read_records(buf.as_slice(), &catalog(), &LoadConfig::default()).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}
