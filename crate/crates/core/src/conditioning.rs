//! Per-patch fine-grained conditions: deterministic stand-ins for the text
//! and image encoders, the condition bundle fed to decoupled cross-attention,
//! and the caption manifest that carries per-patch descriptions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionWeights;
use crate::error::{invalid, Error, Result};
use crate::grid::LatentGrid;
use crate::matrix::Matrix;
use crate::tiler::PatchLayout;

/// Instruction given to the captioning model for every patch.
pub const CAPTION_INSTRUCTION: &str = "Describe the following image patch in detail.";

pub const MANIFEST_VERSION: u32 = 1;

/// Default image-prompt weight.
pub const DEFAULT_LAMBDA: f64 = 0.8;

/// Side of the area-downsampled thumbnail used by the image stub.
pub const THUMBNAIL_SIDE: usize = 8;

/// `tokens x dim` text condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Matrix);

/// `tokens x dim` image-prompt condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding(pub Matrix);

impl TextEmbedding {
    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

impl ImageEmbedding {
    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub text: TextEmbedding,
    pub image: ImageEmbedding,
    pub lambda: f64,
}

impl ConditionBundle {
    pub fn new(text: TextEmbedding, image: ImageEmbedding, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            text,
            image,
            lambda,
        })
    }

    /// Like [`ConditionBundle::new`], additionally checking the embedding
    /// widths against the attention projections that will consume them.
    pub fn for_weights(
        text: TextEmbedding,
        image: ImageEmbedding,
        lambda: f64,
        weights: &AttentionWeights,
    ) -> Result<Self> {
        let bundle = Self::new(text, image, lambda)?;
        bundle.check_dims(weights)?;
        Ok(bundle)
    }

    pub fn check_dims(&self, w: &AttentionWeights) -> Result<()> {
        if self.text.dim() != w.text_dim() {
            return Err(invalid(format!(
                "text embedding width {} does not match attention input {}",
                self.text.dim(),
                w.text_dim()
            )));
        }
        if self.image.dim() != w.image_dim() {
            return Err(invalid(format!(
                "image embedding width {} does not match attention input {}",
                self.image.dim(),
                w.image_dim()
            )));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.text.clone(), self.image.clone(), lambda)
    }
}

fn seeded_rng(domain: &[u8], seed: u64, index: u64, payload: &[u8]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(domain);
    hasher.update(seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(payload);
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

/// Deterministic text encoder stand-in: row `i` is drawn from a generator
/// keyed by a SHA-256 of `(seed, i, text)` and scaled to unit norm.
pub fn embed_text_stub(text: &str, tokens: usize, dim: usize, seed: u64) -> Result<TextEmbedding> {
    if text.is_empty() {
        return Err(invalid("cannot embed empty text"));
    }
    if tokens == 0 || dim == 0 {
        return Err(invalid("text embedding needs tokens >= 1 and dim >= 1"));
    }
    let mut data = Vec::with_capacity(tokens * dim);
    for row in 0..tokens {
        let mut rng = seeded_rng(b"text", seed, row as u64, text.as_bytes());
        let mut values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
            norm = 1.0;
        }
        data.extend(values.iter().map(|v| v / norm));
    }
    Matrix::from_vec(tokens, dim, data).map(TextEmbedding)
}

/// Features summarising a patch: per channel mean and standard deviation,
/// followed by an area-averaged `8 x 8` thumbnail of every channel.
pub fn image_features(patch: &LatentGrid) -> Vec<f64> {
    let (h, w, c) = patch.shape();
    let n = (h * w) as f64;
    let mut features = Vec::with_capacity(c * (2 + THUMBNAIL_SIDE * THUMBNAIL_SIDE));
    for ch in 0..c {
        let plane = patch.channel_plane(ch);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        features.push(mean);
        features.push(var.sqrt());
    }
    let bin = |i: usize, len: usize| {
        let start = (i * len / THUMBNAIL_SIDE).min(len - 1);
        let end = ((i + 1) * len).div_ceil(THUMBNAIL_SIDE).clamp(start + 1, len);
        start..end
    };
    for ch in 0..c {
        for by in 0..THUMBNAIL_SIDE {
            for bx in 0..THUMBNAIL_SIDE {
                let (rows, cols) = (bin(by, h), bin(bx, w));
                let count = (rows.len() * cols.len()) as f64;
                let sum: f64 = rows
                    .flat_map(|r| cols.clone().map(move |col| (r, col)))
                    .map(|(r, col)| patch.get(r, col, ch))
                    .sum();
                features.push(sum / count);
            }
        }
    }
    features
}

/// Deterministic image encoder stand-in: [`image_features`] projected by a
/// seeded random matrix and reshaped to `tokens x dim`.
pub fn encode_image_prompt_stub(
    patch: &LatentGrid,
    tokens: usize,
    dim: usize,
    seed: u64,
) -> Result<ImageEmbedding> {
    if tokens == 0 || dim == 0 {
        return Err(invalid("image embedding needs tokens >= 1 and dim >= 1"));
    }
    let features = image_features(patch);
    let mut rng = seeded_rng(b"image-projection", seed, features.len() as u64, &[]);
    let scale = (3.0 / features.len() as f64).sqrt();
    let data = (0..tokens * dim)
        .map(|_| {
            features
                .iter()
                .map(|f| f * rng.gen_range(-1.0..1.0) * scale)
                .sum()
        })
        .collect();
    Matrix::from_vec(tokens, dim, data).map(ImageEmbedding)
}

/// Zero image condition, for sampling without an image prompt.
pub fn empty_image_embedding(tokens: usize, dim: usize) -> ImageEmbedding {
    ImageEmbedding(Matrix::zeros(tokens, dim))
}

/// On-disk manifest layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub global_prompt: String,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PatchLayout>,
    #[serde(default)]
    pub patches: BTreeMap<usize, String>,
}

fn default_instruction() -> String {
    CAPTION_INSTRUCTION.to_string()
}

/// Captions resolved for every patch of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionManifest {
    pub global_prompt: String,
    pub instruction: String,
    captions: Vec<String>,
    /// Patch indices that had no entry and fell back to the global prompt.
    pub fallbacks: Vec<usize>,
}

impl CaptionManifest {
    /// Every patch captioned with the global prompt.
    pub fn uniform(global_prompt: impl Into<String>, patch_count: usize) -> Self {
        let global_prompt = global_prompt.into();
        Self {
            captions: vec![global_prompt.clone(); patch_count],
            global_prompt,
            instruction: CAPTION_INSTRUCTION.to_string(),
            fallbacks: Vec::new(),
        }
    }

    pub fn from_captions(global_prompt: impl Into<String>, captions: Vec<String>) -> Self {
        Self {
            global_prompt: global_prompt.into(),
            instruction: CAPTION_INSTRUCTION.to_string(),
            captions,
            fallbacks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn caption(&self, index: usize) -> &str {
        &self.captions[index]
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    /// Resolves a parsed manifest against `layout`.
    pub fn resolve(file: ManifestFile, layout: &PatchLayout) -> std::result::Result<Self, String> {
        if file.version != MANIFEST_VERSION {
            return Err(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                file.version
            ));
        }
        if file.instruction != CAPTION_INSTRUCTION {
            return Err(format!(
                "instruction must be {CAPTION_INSTRUCTION:?}, found {:?}",
                file.instruction
            ));
        }
        let n = layout.len();
        if let Some(count) = file.patch_count {
            if count != n {
                return Err(format!("manifest lists {count} patches but the layout has {n}"));
            }
        }
        if let Some(l) = &file.layout {
            if l != layout {
                return Err(format!(
                    "manifest layout ({} patches, window {}x{}, stride {}x{}) does not match the requested layout ({n} patches)",
                    l.len(),
                    l.win_h,
                    l.win_w,
                    l.stride_h,
                    l.stride_w
                ));
            }
        }
        if let Some((&bad, _)) = file.patches.range(n..).next() {
            return Err(format!("patch index {bad} out of range for {n} patches"));
        }
        let mut fallbacks = Vec::new();
        let captions = (0..n)
            .map(|i| match file.patches.get(&i) {
                Some(c) if !c.trim().is_empty() => c.clone(),
                _ => {
                    log::warn!("no caption for patch {i}; using the global prompt");
                    fallbacks.push(i);
                    file.global_prompt.clone()
                }
            })
            .collect();
        Ok(Self {
            global_prompt: file.global_prompt,
            instruction: file.instruction,
            captions,
            fallbacks,
        })
    }

    /// Serializable form including the layout it was built for.
    pub fn to_file(&self, layout: &PatchLayout) -> ManifestFile {
        ManifestFile {
            version: MANIFEST_VERSION,
            global_prompt: self.global_prompt.clone(),
            instruction: self.instruction.clone(),
            patch_count: Some(layout.len()),
            layout: Some(layout.clone()),
            patches: self.captions.iter().cloned().enumerate().collect(),
        }
    }
}

fn manifest_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: PathBuf::from(path),
        message: message.into(),
    }
}

/// Reads a JSON caption manifest and resolves it against `layout`.
pub fn load_caption_manifest(path: impl AsRef<Path>, layout: &PatchLayout) -> Result<CaptionManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| {
        manifest_error(
            path,
            format!("parse error at line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    CaptionManifest::resolve(file, layout).map_err(|m| manifest_error(path, m))
}

/// Pretty-printed JSON for `manifest` over `layout`.
pub fn manifest_to_json(manifest: &CaptionManifest, layout: &PatchLayout) -> String {
    serde_json::to_string_pretty(&manifest.to_file(layout))
        .expect("manifest contains only strings and integers")
}

pub fn save_caption_manifest(
    path: impl AsRef<Path>,
    manifest: &CaptionManifest,
    layout: &PatchLayout,
) -> Result<()> {
    let path = path.as_ref();
    let json = manifest_to_json(manifest, layout);
    std::fs::write(path, json + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::plan_patches;

    #[test]
    fn text_stub_is_deterministic_unit_norm() {
        let a = embed_text_stub("a red fox", 5, 16, 3).unwrap();
        assert_eq!(a, embed_text_stub("a red fox", 5, 16, 3).unwrap());
        for r in 0..5 {
            let n: f64 = a.0.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_ne!(
            embed_text_stub("a", 2, 4, 1).unwrap(),
            embed_text_stub("b", 2, 4, 1).unwrap()
        );
        assert_ne!(a, embed_text_stub("a red fox", 5, 16, 4).unwrap());
        assert!(embed_text_stub("", 1, 1, 0).is_err());
        assert!(embed_text_stub("x", 0, 1, 0).is_err());
    }

    #[test]
    fn image_features_of_constant_patch() {
        let p = LatentGrid::filled(5, 3, 2, 0.4);
        let f = image_features(&p);
        assert_eq!(f.len(), 2 * (2 + 64));
        assert!((f[0] - 0.4).abs() < 1e-15);
        assert!(f[1].abs() < 1e-15);
        assert!(f[4..].iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn image_stub_tracks_patch_content() {
        let p = LatentGrid::from_fn(16, 16, 3, |r, c, ch| (r * 16 + c + ch) as f64 / 300.0);
        let a = encode_image_prompt_stub(&p, 4, 8, 9).unwrap();
        assert_eq!(a, encode_image_prompt_stub(&p.clone(), 4, 8, 9).unwrap());
        assert_eq!((a.tokens(), a.dim()), (4, 8));
        let mut q = p.clone();
        q.set(7, 9, 1, 0.9);
        assert_ne!(a, encode_image_prompt_stub(&q, 4, 8, 9).unwrap());
    }

    #[test]
    fn bundle_rejects_negative_lambda() {
        let t = embed_text_stub("x", 1, 2, 0).unwrap();
        let i = empty_image_embedding(1, 2);
        assert!(ConditionBundle::new(t.clone(), i.clone(), -0.1).is_err());
        assert!(ConditionBundle::new(t, i, DEFAULT_LAMBDA).is_ok());
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn manifest_roundtrip_and_fallback() {
        let layout = plan_patches(256, 256, 128, 128, 64, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<String> = (0..9).map(|i| format!("patch {i}")).collect();
        let m = CaptionManifest::from_captions("global", captions);
        let path = dir.path().join("m.json");
        save_caption_manifest(&path, &m, &layout).unwrap();
        let loaded = load_caption_manifest(&path, &layout).unwrap();
        assert_eq!(loaded.len(), 9);
        assert_eq!(loaded, m);

        let mut patches: BTreeMap<usize, String> =
            (0..9).map(|i| (i, format!("patch {i}"))).collect();
        patches.remove(&4);
        let file = ManifestFile {
            version: 1,
            global_prompt: "global".into(),
            instruction: CAPTION_INSTRUCTION.into(),
            patch_count: None,
            layout: None,
            patches,
        };
        let p = write(&dir, "missing.json", &serde_json::to_string(&file).unwrap());
        let loaded = load_caption_manifest(&p, &layout).unwrap();
        assert_eq!(loaded.caption(4), "global");
        assert_eq!(loaded.fallbacks, vec![4]);
    }

    #[test]
    fn manifest_errors() {
        let layout = plan_patches(8, 8, 4, 4, 4, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.json", "{\n  \"version\": 1,\n  \"global_prompt\": \n}");
        let msg = load_caption_manifest(&p, &layout).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");

        let p = write(
            &dir,
            "count.json",
            r#"{"version":1,"global_prompt":"g","patch_count":9,"patches":{}}"#,
        );
        let msg = load_caption_manifest(&p, &layout).unwrap_err().to_string();
        assert!(msg.contains("9 patches"), "{msg}");

        let p = write(
            &dir,
            "range.json",
            r#"{"version":1,"global_prompt":"g","patches":{"4":"x"}}"#,
        );
        assert!(load_caption_manifest(&p, &layout).is_err());

        let p = write(
            &dir,
            "instr.json",
            r#"{"version":1,"global_prompt":"g","instruction":"Caption this.","patches":{}}"#,
        );
        assert!(load_caption_manifest(&p, &layout).is_err());

        let p = write(&dir, "v2.json", r#"{"version":2,"global_prompt":"g"}"#);
        assert!(load_caption_manifest(&p, &layout).is_err());

        let missing = dir.path().join("nope.json");
        let msg = load_caption_manifest(&missing, &layout).unwrap_err().to_string();
        assert!(msg.contains("nope.json"));
    }
}
