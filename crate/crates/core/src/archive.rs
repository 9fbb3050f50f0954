//! On-disk archives: an uncompressed ZIP of NPY 1.0 arrays plus `manifest.json`.
//!
//! Three archive kinds share the container:
//!
//! * `episode`: `support_feat_{c}_{k}`, `support_mask_{c}_{k}`, `unlabeled_feat_{i}`,
//!   `query_feat_{j}`, `query_mask_{j}`, `class_list`, `image_size`
//! * `message_weights`: `gnn_weight`, with a `nonparametric` manifest flag
//! * `prediction`: `pred_mask`
//!
//! Feature grids are `float32 (H_f, W_f, n_ch)`, masks `uint8 (H, W)` at original
//! resolution, `class_list` and `image_size` are `int64` vectors. Array members
//! are named `<entry>.npy`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::episode::{Episode, LabeledImage};
use crate::error::{Error, Result};
use crate::npy::{self, NpyArray};
use crate::refine::MessageWeights;
use crate::tensor::{FeatureGrid, LabelGrid, IGNORE};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub const KIND_EPISODE: &str = "episode";
pub const KIND_WEIGHTS: &str = "message_weights";
pub const KIND_PREDICTION: &str = "prediction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub entries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_way: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_unlabeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_query: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonparametric: Option<bool>,
}

impl Manifest {
    fn new(kind: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            entries: Vec::new(),
            n_way: None,
            k_shot: None,
            n_unlabeled: None,
            n_query: None,
            nonparametric: None,
        }
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedArchive(msg.into())
}

fn zip_err(e: zip::result::ZipError) -> Error {
    match e {
        zip::result::ZipError::Io(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => {
            Error::Io(io)
        }
        other => malformed(other.to_string()),
    }
}

/// Writes `arrays` (in order) and a manifest listing them.
pub fn write_archive(
    path: &Path,
    mut manifest: Manifest,
    arrays: &[(String, NpyArray)],
) -> Result<()> {
    manifest.entries = arrays.iter().map(|(name, _)| name.clone()).collect();
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    let mut zip = ZipWriter::new(File::create(path)?);
    zip.start_file(MANIFEST, options).map_err(zip_err)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.into()))?;
    zip.write_all(&json)?;
    for (name, array) in arrays {
        zip.start_file(format!("{name}.npy"), options)
            .map_err(zip_err)?;
        zip.write_all(&npy::encode(array))?;
    }
    zip.finish().map_err(zip_err)?;
    Ok(())
}

/// Reads the manifest and every array it names.
pub fn read_archive(path: &Path) -> Result<(Manifest, BTreeMap<String, NpyArray>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;

    let manifest: Manifest = {
        let entry = zip
            .by_name(MANIFEST)
            .map_err(|_| malformed("missing manifest.json"))?;
        serde_json::from_reader(entry).map_err(|e| malformed(format!("bad manifest: {e}")))?
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let mut arrays = BTreeMap::new();
    for name in &manifest.entries {
        let mut entry = zip
            .by_name(&format!("{name}.npy"))
            .map_err(|_| malformed(format!("missing entry {name}")))?;
        if entry.compression() != CompressionMethod::Stored {
            return Err(malformed(format!("entry {name} is compressed")));
        }
        let mut buf = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut buf)
            .map_err(|e| malformed(format!("entry {name}: {e}")))?;
        let array = npy::decode(&buf).map_err(|e| malformed(format!("entry {name}: {e}")))?;
        arrays.insert(name.clone(), array);
    }
    Ok((manifest, arrays))
}

fn feature_array(grid: &FeatureGrid) -> NpyArray {
    NpyArray::F32 {
        shape: vec![grid.height(), grid.width(), grid.channels()],
        data: grid.values().to_vec(),
    }
}

fn mask_array(mask: &LabelGrid) -> NpyArray {
    NpyArray::U8 {
        shape: vec![mask.height(), mask.width()],
        data: mask.labels().to_vec(),
    }
}

struct Entries(BTreeMap<String, NpyArray>);

impl Entries {
    fn take(&mut self, name: &str) -> Result<NpyArray> {
        self.0
            .remove(name)
            .ok_or_else(|| malformed(format!("missing entry {name}")))
    }

    fn features(&mut self, name: &str) -> Result<FeatureGrid> {
        match self.take(name)? {
            NpyArray::F32 { shape, data } if shape.len() == 3 => {
                FeatureGrid::new(shape[0], shape[1], shape[2], data).map_err(|e| match e {
                    Error::InvalidEpisode(m) => Error::InvalidEpisode(format!("{name}: {m}")),
                    other => malformed(format!("{name}: {other}")),
                })
            }
            other => Err(malformed(format!(
                "{name} must be a 3-d float32 array, got {} {:?}",
                other.dtype_name(),
                other.shape()
            ))),
        }
    }

    fn mask(&mut self, name: &str) -> Result<LabelGrid> {
        match self.take(name)? {
            NpyArray::U8 { shape, data } if shape.len() == 2 => {
                LabelGrid::new(shape[0], shape[1], data)
                    .map_err(|e| malformed(format!("{name}: {e}")))
            }
            other => Err(malformed(format!(
                "{name} must be a 2-d uint8 array, got {} {:?}",
                other.dtype_name(),
                other.shape()
            ))),
        }
    }

    fn ints(&mut self, name: &str) -> Result<Vec<i64>> {
        match self.take(name)? {
            NpyArray::I64 { shape, data } if shape.len() == 1 => Ok(data),
            other => Err(malformed(format!(
                "{name} must be a 1-d int64 array, got {} {:?}",
                other.dtype_name(),
                other.shape()
            ))),
        }
    }
}

fn count(manifest: &Manifest, field: Option<usize>, name: &str) -> Result<usize> {
    field.ok_or_else(|| malformed(format!("{} manifest lacks {name}", manifest.kind)))
}

/// Validates and writes an episode archive.
pub fn write_episode_archive(episode: &Episode, path: &Path) -> Result<()> {
    episode.validate()?;
    let mut arrays = Vec::new();
    for (c, shots) in episode.support.iter().enumerate() {
        for (k, img) in shots.iter().enumerate() {
            arrays.push((
                format!("support_feat_{c}_{k}"),
                feature_array(&img.features),
            ));
            arrays.push((format!("support_mask_{c}_{k}"), mask_array(&img.mask)));
        }
    }
    for (i, grid) in episode.unlabeled.iter().enumerate() {
        arrays.push((format!("unlabeled_feat_{i}"), feature_array(grid)));
    }
    for (j, img) in episode.queries.iter().enumerate() {
        arrays.push((format!("query_feat_{j}"), feature_array(&img.features)));
        arrays.push((format!("query_mask_{j}"), mask_array(&img.mask)));
    }
    arrays.push((
        "class_list".into(),
        NpyArray::I64 {
            shape: vec![episode.class_list.len()],
            data: episode.class_list.iter().map(|&c| c as i64).collect(),
        },
    ));
    arrays.push((
        "image_size".into(),
        NpyArray::I64 {
            shape: vec![2],
            data: vec![episode.image_size.0 as i64, episode.image_size.1 as i64],
        },
    ));
    let manifest = Manifest {
        n_way: Some(episode.n_way()),
        k_shot: Some(episode.k_shot()),
        n_unlabeled: Some(episode.unlabeled.len()),
        n_query: Some(episode.queries.len()),
        ..Manifest::new(KIND_EPISODE)
    };
    write_archive(path, manifest, &arrays)
}

/// Reads an episode archive and validates every episode invariant.
pub fn read_episode_archive(path: &Path) -> Result<Episode> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest.kind != KIND_EPISODE {
        return Err(malformed(format!(
            "expected an episode archive, found {}",
            manifest.kind
        )));
    }
    let n_way = count(&manifest, manifest.n_way, "n_way")?;
    let k_shot = count(&manifest, manifest.k_shot, "k_shot")?;
    let n_unlabeled = count(&manifest, manifest.n_unlabeled, "n_unlabeled")?;
    let n_query = count(&manifest, manifest.n_query, "n_query")?;
    let mut entries = Entries(arrays);

    let class_list = entries
        .ints("class_list")?
        .into_iter()
        .map(|c| u8::try_from(c).ok().filter(|&c| c != 0 && c != IGNORE))
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| malformed("class identifiers must lie in 1..=254"))?;
    if class_list.len() != n_way {
        return Err(malformed(format!(
            "class_list has {} entries, manifest n_way {n_way}",
            class_list.len()
        )));
    }
    let size = entries.ints("image_size")?;
    let image_size = match size.as_slice() {
        &[h, w] if h > 0 && w > 0 => (h as usize, w as usize),
        _ => return Err(malformed("image_size must be two positive integers")),
    };

    let mut support = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let mut shots = Vec::with_capacity(k_shot);
        for k in 0..k_shot {
            shots.push(LabeledImage {
                features: entries.features(&format!("support_feat_{c}_{k}"))?,
                mask: entries.mask(&format!("support_mask_{c}_{k}"))?,
            });
        }
        support.push(shots);
    }
    let unlabeled = (0..n_unlabeled)
        .map(|i| entries.features(&format!("unlabeled_feat_{i}")))
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..n_query)
        .map(|j| {
            Ok(LabeledImage {
                features: entries.features(&format!("query_feat_{j}"))?,
                mask: entries.mask(&format!("query_mask_{j}"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let episode = Episode {
        class_list,
        support,
        unlabeled,
        queries,
        image_size,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn write_weights_archive(weights: &MessageWeights, path: &Path) -> Result<()> {
    let n = weights.dim();
    let manifest = Manifest {
        nonparametric: Some(weights.is_nonparametric()),
        ..Manifest::new(KIND_WEIGHTS)
    };
    write_archive(
        path,
        manifest,
        &[(
            "gnn_weight".into(),
            NpyArray::F32 {
                shape: vec![n, n],
                data: weights.matrix().to_vec(),
            },
        )],
    )
}

pub fn read_weights_archive(path: &Path) -> Result<MessageWeights> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest.kind != KIND_WEIGHTS {
        return Err(malformed(format!(
            "expected a weights archive, found {}",
            manifest.kind
        )));
    }
    let nonparametric = manifest
        .nonparametric
        .ok_or_else(|| malformed("weights manifest lacks nonparametric"))?;
    match Entries(arrays).take("gnn_weight")? {
        NpyArray::F32 { shape, data } if shape.len() == 2 && shape[0] == shape[1] => {
            MessageWeights::from_matrix(shape[0], data, nonparametric)
                .map_err(|e| malformed(e.to_string()))
        }
        other => Err(malformed(format!(
            "gnn_weight must be a square float32 matrix, got {:?}",
            other.shape()
        ))),
    }
}

pub fn write_prediction_archive(mask: &LabelGrid, path: &Path) -> Result<()> {
    write_archive(
        path,
        Manifest::new(KIND_PREDICTION),
        &[("pred_mask".into(), mask_array(mask))],
    )
}

pub fn read_prediction_archive(path: &Path) -> Result<LabelGrid> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest.kind != KIND_PREDICTION {
        return Err(malformed(format!(
            "expected a prediction archive, found {}",
            manifest.kind
        )));
    }
    Entries(arrays).mask("pred_mask")
}
