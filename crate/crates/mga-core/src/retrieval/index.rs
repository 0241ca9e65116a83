//! Gallery indexing and two-stage search: a global-cosine shortlist over
//! precomputed unit globals, then a full pair-attention rerank of the
//! candidates.
//!
//! Per-image work (global pooling, FGA tokens) is done once at build time.
//! Stage-1 attention depends on both images of a pair, so it runs at query
//! time, which is why the shortlist exists: it bounds the number of
//! transformer passes per query.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ata::Reduction;
use crate::data::types::{GlobalFeature, ImageRecord};
use crate::error::{MgaError, Result};
use crate::fga::TokenSet;
use crate::model::{ImageEmbedding, ModelParams};
use crate::numerics::matrix::{Matrix, Real};
use crate::numerics::ops::l2_normalize;
use crate::scorer::{global_similarity, score_embeddings};

pub const INDEX_MAGIC: [u8; 4] = *b"MGAI";
pub const INDEX_VERSION: u16 = 1;

/// One gallery image, ready for both search stages: unit global feature
/// for the shortlist, cached per-layer tokens for the rerank.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry<T> {
    pub image_id: String,
    pub class_id: u32,
    pub global: GlobalFeature<T>,
    pub coarse_tokens: TokenSet<T>,
    pub fine_tokens: TokenSet<T>,
}

impl<T: Real> IndexEntry<T> {
    pub fn embedding(&self) -> ImageEmbedding<T> {
        ImageEmbedding {
            global: self.global.clone(),
            coarse_tokens: self.coarse_tokens.clone(),
            fine_tokens: self.fine_tokens.clone(),
        }
    }
}

/// Immutable gallery index; entries keep the build-time record order.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex<T> {
    entries: Vec<IndexEntry<T>>,
    by_id: HashMap<String, usize>,
}

impl<T: Real> GalleryIndex<T> {
    pub fn from_entries(entries: Vec<IndexEntry<T>>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.image_id.clone(), i).is_some() {
                return Err(MgaError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&IndexEntry<T>> {
        self.by_id.get(image_id).map(|&i| &self.entries[i])
    }

    /// image_id -> class_id for every gallery entry.
    pub fn class_map(&self) -> HashMap<String, u32> {
        self.entries
            .iter()
            .map(|e| (e.image_id.clone(), e.class_id))
            .collect()
    }
}

/// Embeds every gallery record and normalizes its global feature.
pub fn build_index<T: Real>(
    records: &[ImageRecord<T>],
    model: &ModelParams<T>,
) -> Result<GalleryIndex<T>> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let emb = model.embed(rec)?;
        let unit = l2_normalize(&emb.global.values)?;
        entries.push(IndexEntry {
            image_id: rec.image_id.clone(),
            class_id: rec.class_id,
            global: GlobalFeature { values: unit },
            coarse_tokens: emb.coarse_tokens,
            fine_tokens: emb.fine_tokens,
        });
    }
    GalleryIndex::from_entries(entries)
}

/// A shortlist hit: gallery image plus its global cosine to the query.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortlistHit<T> {
    pub image_id: String,
    pub s_global: T,
}

fn rank_order<T: Real>(score_a: T, id_a: &str, score_b: T, id_b: &str) -> Ordering {
    // descending score, ties broken by ascending image_id
    score_b
        .partial_cmp(&score_a)
        .unwrap_or(Ordering::Equal)
        .then_with(|| id_a.cmp(id_b))
}

/// Exact top-k gallery entries by global cosine. `k > |gallery|` returns
/// the whole gallery, ordered.
pub fn shortlist_global<T: Real>(
    query_global: &GlobalFeature<T>,
    index: &GalleryIndex<T>,
    k: usize,
) -> Result<Vec<ShortlistHit<T>>> {
    let mut hits = Vec::with_capacity(index.len());
    for e in index.entries() {
        hits.push(ShortlistHit {
            image_id: e.image_id.clone(),
            s_global: global_similarity(query_global, &e.global)?,
        });
    }
    hits.sort_by(|a, b| rank_order(a.s_global, &a.image_id, b.s_global, &b.image_id));
    hits.truncate(k);
    Ok(hits)
}

/// Shortlist straight from a raw query record. Global pooling has no
/// learned parameters, so no model is needed for this stage.
pub fn shortlist<T: Real>(
    query: &ImageRecord<T>,
    index: &GalleryIndex<T>,
    k: usize,
) -> Result<Vec<ShortlistHit<T>>> {
    let global = crate::data::types::derive_global(query.layer(crate::data::types::LayerTag::Coarse)?);
    shortlist_global(&global, index, k)
}

/// One rerank result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry<T> {
    pub image_id: String,
    pub s_overall: T,
    pub s_global: T,
    pub s_token: T,
}

/// Candidates ordered by descending s_overall, ties by ascending image_id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList<T> {
    pub entries: Vec<RankedEntry<T>>,
}

/// Scores every candidate with the full pair pipeline and orders them.
/// The result is independent of the candidate input order.
pub fn rerank<T: Real>(
    query: &ImageEmbedding<T>,
    candidates: &[String],
    index: &GalleryIndex<T>,
    model: &ModelParams<T>,
    alpha: T,
    reduction: Reduction,
) -> Result<RankedList<T>> {
    let mut entries: Vec<RankedEntry<T>> = candidates
        .par_iter()
        .map(|id| {
            let entry = index
                .get(id)
                .ok_or_else(|| MgaError::UnknownCandidate(id.clone()))?;
            let report = score_embeddings(query, &entry.embedding(), model, alpha, reduction)?;
            Ok(RankedEntry {
                image_id: id.clone(),
                s_overall: report.s_overall,
                s_global: report.s_global,
                s_token: report.s_token,
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| rank_order(a.s_overall, &a.image_id, b.s_overall, &b.image_id));
    Ok(RankedList { entries })
}

/// Two-stage search for one query record: shortlist by global cosine,
/// then rerank the shortlist with pair attention.
pub fn search<T: Real>(
    query: &ImageRecord<T>,
    index: &GalleryIndex<T>,
    model: &ModelParams<T>,
    alpha: T,
    shortlist_k: usize,
    reduction: Reduction,
) -> Result<RankedList<T>> {
    let emb = model.embed(query)?;
    let hits = shortlist_global(&emb.global, index, shortlist_k)?;
    let ids: Vec<String> = hits.into_iter().map(|h| h.image_id).collect();
    rerank(&emb, &ids, index, model, alpha, reduction)
}

fn write_matrix<T: Real, W: Write>(w: &mut W, m: &Matrix<T>) -> Result<()> {
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &v in m.as_slice() {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

fn read_matrix<T: Real, R: Read>(r: &mut R) -> Result<Matrix<T>> {
    let rows = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(T::from_f64(r.read_f64::<LittleEndian>().map_err(eof)?));
    }
    Ok(Matrix::from_vec(rows, cols, values))
}

fn eof(e: std::io::Error) -> MgaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MgaError::TruncatedFile("unexpected end of index file".into())
    } else {
        MgaError::Io(e)
    }
}

/// Serializes an index. Values are stored as f64 little-endian, which is
/// lossless for both runtime precisions.
pub fn write_index<T: Real, W: Write>(index: &GalleryIndex<T>, w: &mut W) -> Result<()> {
    w.write_all(&INDEX_MAGIC)?;
    w.write_u16::<LittleEndian>(INDEX_VERSION)?;
    w.write_u32::<LittleEndian>(index.len() as u32)?;
    for e in index.entries() {
        let id = e.image_id.as_bytes();
        w.write_u16::<LittleEndian>(id.len() as u16)?;
        w.write_all(id)?;
        w.write_u32::<LittleEndian>(e.class_id)?;
        w.write_u32::<LittleEndian>(e.global.values.len() as u32)?;
        for &v in &e.global.values {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        write_matrix(w, &e.coarse_tokens.tokens)?;
        write_matrix(w, &e.fine_tokens.tokens)?;
    }
    Ok(())
}

pub fn read_index<T: Real, R: Read>(r: &mut R) -> Result<GalleryIndex<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != INDEX_MAGIC {
        return Err(MgaError::BadMagic {
            expected: INDEX_MAGIC,
            got: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(eof)?;
    if version != INDEX_VERSION {
        return Err(MgaError::UnsupportedVersion(version));
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes).map_err(eof)?;
        let image_id = String::from_utf8(id_bytes)
            .map_err(|_| MgaError::TruncatedFile("image_id is not valid UTF-8".into()))?;
        let class_id = r.read_u32::<LittleEndian>().map_err(eof)?;
        let dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut global = Vec::with_capacity(dim);
        for _ in 0..dim {
            global.push(T::from_f64(r.read_f64::<LittleEndian>().map_err(eof)?));
        }
        let coarse_tokens = TokenSet {
            tokens: read_matrix(r)?,
        };
        let fine_tokens = TokenSet {
            tokens: read_matrix(r)?,
        };
        entries.push(IndexEntry {
            image_id,
            class_id,
            global: GlobalFeature { values: global },
            coarse_tokens,
            fine_tokens,
        });
    }
    GalleryIndex::from_entries(entries)
}

pub fn write_index_file<T: Real>(index: &GalleryIndex<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_index_file<T: Real>(path: &Path) -> Result<GalleryIndex<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_index(&mut r)
}
