//! Identity, text and relation alignment metrics and the RelationBench
//! harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine, hashed_unit_vector, BackendKind, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;
use crate::params::hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pos {
    Det,
    Aux,
    Adp,
    Particle,
    Adj,
    Verb,
    Noun,
    Punct,
}

/// A part-of-speech tagger over pre-split words.
pub trait Tagger {
    fn tag(&self, words: &[&str]) -> Vec<Pos>;
}

/// Closed-class word lists plus suffix rules. Open-class words default to
/// nouns.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleTagger;

const DETERMINERS: &[&str] =
    &["a", "an", "the", "this", "that", "these", "those", "their", "his", "her", "its", "my", "your", "our", "some"];
const AUXILIARIES: &[&str] = &["is", "are", "am", "was", "were", "be", "been", "being"];
const ADPOSITIONS: &[&str] = &[
    "with", "in", "on", "at", "by", "under", "through", "along", "across", "during", "after", "before", "from",
    "of", "into", "onto", "over", "to", "for", "near", "behind", "beside", "around", "against", "toward",
    "towards", "between", "above", "below",
];
const PARTICLES: &[&str] = &["up", "down", "off", "out", "away", "back"];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "white", "black", "grey", "gray", "brown",
    "big", "small", "large", "little", "old", "young", "soft", "quiet", "steep", "dense", "lush", "modern",
    "grand", "rainy", "sandy", "scenic", "vibrant", "elegant", "formal", "romantic", "vintage", "live",
    "open-air", "intense", "peaceful",
];
/// `-ing` words that are not verbs.
const ING_NOUNS: &[&str] =
    &["thing", "king", "ring", "evening", "morning", "building", "ceiling", "spring", "string", "wing", "sibling"];
/// Present-tense third-person verbs the suffix rule cannot see.
const FINITE_VERBS: &[&str] = &[
    "shakes", "hugs", "rides", "plays", "holds", "kisses", "carries", "sits", "stands", "eats", "reads",
    "dances", "fights", "lifts", "cooks", "sings", "sleeps", "wrestles", "leans", "hold", "hug", "ride", "play",
];
/// Verbs whose object belongs to the predicate ("playing chess").
const LIGHT_VERBS: &[&str] = &[
    "playing", "plays", "riding", "rides", "eating", "eats", "reading", "reads", "cooking", "cooks", "lifting",
    "lifts", "shaking", "shakes", "holding", "holds", "drinking", "drinks", "driving", "drives", "flying", "flies",
    "wearing", "wears", "throwing", "throws", "kicking", "kicks",
];

impl Tagger for RuleTagger {
    fn tag(&self, words: &[&str]) -> Vec<Pos> {
        words
            .iter()
            .map(|w| {
                let l = w.to_lowercase();
                let l = l.as_str();
                if !l.chars().any(char::is_alphanumeric) {
                    Pos::Punct
                } else if DETERMINERS.contains(&l) {
                    Pos::Det
                } else if AUXILIARIES.contains(&l) {
                    Pos::Aux
                } else if ADPOSITIONS.contains(&l) {
                    Pos::Adp
                } else if PARTICLES.contains(&l) {
                    Pos::Particle
                } else if ADJECTIVES.contains(&l) {
                    Pos::Adj
                } else if FINITE_VERBS.contains(&l) || (l.len() > 4 && l.ends_with("ing") && !ING_NOUNS.contains(&l)) {
                    Pos::Verb
                } else {
                    Pos::Noun
                }
            })
            .collect()
    }
}

/// Words with their byte spans in the source text.
fn words_with_spans(text: &str) -> Vec<(&str, usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let part = c.is_alphanumeric() || c == '-' || c == '\'';
        match (part, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((&text[s..i], s, i));
                start = None;
            }
            _ => {}
        }
        if !part && !c.is_whitespace() {
            out.push((&text[i..i + c.len_utf8()], i, i + c.len_utf8()));
        }
    }
    if let Some(s) = start {
        out.push((&text[s..], s, text.len()));
    }
    out
}

/// The main verb phrase of a prompt, as a verbatim slice of it.
pub fn extract_predicate(prompt: &str) -> Result<String> {
    extract_predicate_with(prompt, &RuleTagger)
}

/// Rules: the root is the first verb. Light verbs also take a following
/// particle and their direct object up to its head noun. Prepositional
/// phrases are never included.
pub fn extract_predicate_with(prompt: &str, tagger: &dyn Tagger) -> Result<String> {
    let words = words_with_spans(prompt);
    if words.is_empty() {
        return Err(Error::NoPredicate(prompt.to_string()));
    }
    let surface: Vec<&str> = words.iter().map(|w| w.0).collect();
    let tags = tagger.tag(&surface);
    let root = tags.iter().position(|t| *t == Pos::Verb).ok_or_else(|| Error::NoPredicate(prompt.to_string()))?;
    let mut end = root;
    if LIGHT_VERBS.contains(&surface[root].to_lowercase().as_str()) {
        let mut i = root + 1;
        if tags.get(i) == Some(&Pos::Particle) {
            end = i;
            i += 1;
        }
        while matches!(tags.get(i), Some(Pos::Det | Pos::Adj)) {
            i += 1;
        }
        if tags.get(i) == Some(&Pos::Noun) {
            // Extend over compound nouns to the head.
            while tags.get(i + 1) == Some(&Pos::Noun) {
                i += 1;
            }
            end = i;
        }
    }
    Ok(prompt[words[root].1..words[end].2].to_string())
}

fn require_joint(backend: &dyn EmbeddingBackend) -> Result<()> {
    if backend.kind() != BackendKind::JointImageText {
        return Err(Error::Backend {
            backend: backend.name().into(),
            reason: "image-text scores need a joint image-text backend".into(),
        });
    }
    Ok(())
}

/// `100·cos(image, prompt)`.
pub fn clip_t(image: &Image, prompt: &str, backend: &dyn EmbeddingBackend) -> Result<f64> {
    require_joint(backend)?;
    Ok(100.0 * cosine(&backend.image_embed(image)?, &backend.text_embed(prompt)?))
}

/// [`clip_t`] against the extracted predicate only.
pub fn clip_r(image: &Image, prompt: &str, backend: &dyn EmbeddingBackend) -> Result<f64> {
    clip_t(image, &extract_predicate(prompt)?, backend)
}

/// One subject's references and, when known, its box in the generated image.
#[derive(Clone, Debug)]
pub struct SubjectRefs {
    pub references: Vec<Image>,
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityScores {
    pub clip_i: f64,
    pub dino: f64,
}

/// Per subject: the mean cosine between the (optionally cropped) generated
/// image and each reference; then the mean over subjects. Scaled by 100.
pub fn identity_scores(
    generated: &Image,
    subjects: &[SubjectRefs],
    joint: &dyn EmbeddingBackend,
    vision: &dyn EmbeddingBackend,
    crop: bool,
) -> Result<IdentityScores> {
    if subjects.is_empty() || subjects.iter().any(|s| s.references.is_empty()) {
        return Err(Error::invalid("every subject needs at least one reference image"));
    }
    let score = |backend: &dyn EmbeddingBackend| -> Result<f64> {
        let mut total = 0.0;
        for s in subjects {
            let region = match (crop, s.bbox) {
                (true, Some(b)) => generated.crop_normalized(b)?,
                _ => generated.clone(),
            };
            let e = backend.image_embed(&region)?;
            let mut sum = 0.0;
            for r in &s.references {
                sum += cosine(&e, &backend.image_embed(r)?);
            }
            total += sum / s.references.len() as f64;
        }
        Ok(100.0 * total / subjects.len() as f64)
    };
    Ok(IdentityScores { clip_i: score(joint)?, dino: score(vision)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSubject {
    pub ref_image: String,
    pub class: String,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub id: String,
    pub subjects: Vec<BenchSubject>,
    pub prompt: String,
    pub predicate_gold: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.subjects.len()) {
            return Err(Error::invalid(format!("case {}: {} subjects", self.id, self.subjects.len())));
        }
        for s in &self.subjects {
            if !self.prompt.contains(&s.class) {
                return Err(Error::invalid(format!("case {}: prompt lacks class noun {:?}", self.id, s.class)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchManifest {
    pub cases: Vec<BenchCase>,
}

impl BenchManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.cases.iter().try_for_each(BenchCase::validate)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: String,
    pub clip_t: f64,
    pub clip_r: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCase {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clip_t: f64,
    pub clip_r: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_cases: usize,
    pub cases: Vec<CaseScores>,
    pub failed: Vec<FailedCase>,
    pub aggregates: Aggregates,
    pub joint_backend: String,
    pub vision_backend: String,
    pub crop: bool,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Crop each subject's box before identity scoring.
    pub crop: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { crop: true }
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (v * k).round() / k
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

impl Aggregates {
    pub fn from_cases(cases: &[CaseScores]) -> Self {
        let col = |f: fn(&CaseScores) -> f64| round_to(stable_mean(cases.iter().map(f).collect()), 1);
        Self { clip_t: col(|c| c.clip_t), clip_r: col(|c| c.clip_r), clip_i: col(|c| c.clip_i), dino: col(|c| c.dino) }
    }
}

impl MetricReport {
    /// Column layout `Method | CLIP-T | CLIP-R | CLIP-I | DINO`.
    pub fn table(&self, method: &str) -> String {
        format_table(&[(method.to_string(), self.aggregates)])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Aligned plain-text table, one row per method.
pub fn format_table(rows: &[(String, Aggregates)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<w$} | CLIP-T | CLIP-R | CLIP-I |   DINO\n", "Method");
    out.push_str(&format!("{}-|--------|--------|--------|-------\n", "-".repeat(w)));
    for (name, a) in rows {
        out.push_str(&format!(
            "{name:<w$} | {:>6.1} | {:>6.1} | {:>6.1} | {:>6.1}\n",
            a.clip_t, a.clip_r, a.clip_i, a.dino
        ));
    }
    out
}

fn config_hash(joint: &str, vision: &str, opts: EvalOptions, manifest: &BenchManifest) -> String {
    let v = serde_json::json!({"joint": joint, "vision": vision, "crop": opts.crop, "manifest": manifest});
    hex(&Sha256::digest(serde_json::to_vec(&v).expect("json")))
}

/// Scores `outputs_dir/{case id}.png` for every case. Reference paths are
/// relative to `manifest_dir`.
pub fn run_benchmark(
    manifest: &BenchManifest,
    manifest_dir: &Path,
    outputs_dir: &Path,
    joint: &dyn EmbeddingBackend,
    vision: &dyn EmbeddingBackend,
    opts: EvalOptions,
) -> Result<MetricReport> {
    require_joint(joint)?;
    let mut cases: Vec<&BenchCase> = manifest.cases.iter().collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let scored = parallel::map(&cases, |case| -> std::result::Result<CaseScores, String> {
        let out = Image::load(outputs_dir.join(format!("{}.png", case.id))).map_err(|e| e.to_string())?;
        let subjects = case
            .subjects
            .iter()
            .map(|s| Ok(SubjectRefs { references: vec![Image::load(manifest_dir.join(&s.ref_image))?], bbox: s.bbox }))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let t = clip_t(&out, &case.prompt, joint).map_err(|e| e.to_string())?;
        let r = clip_r(&out, &case.prompt, joint).map_err(|e| e.to_string())?;
        let id = identity_scores(&out, &subjects, joint, vision, opts.crop).map_err(|e| e.to_string())?;
        Ok(CaseScores {
            id: case.id.clone(),
            clip_t: round_to(t, 4),
            clip_r: round_to(r, 4),
            clip_i: round_to(id.clip_i, 4),
            dino: round_to(id.dino, 4),
        })
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (case, res) in cases.iter().zip(scored) {
        match res {
            Ok(s) => ok.push(s),
            Err(reason) => {
                log::warn!("case {} skipped: {reason}", case.id);
                failed.push(FailedCase { id: case.id.clone(), reason });
            }
        }
    }
    Ok(MetricReport {
        num_cases: manifest.cases.len(),
        aggregates: Aggregates::from_cases(&ok),
        cases: ok,
        failed,
        joint_backend: joint.name().into(),
        vision_backend: vision.name().into(),
        crop: opts.crop,
        config_hash: config_hash(joint.name(), vision.name(), opts, manifest),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPrompt {
    pub id: usize,
    /// `{ }` marks each subject slot.
    pub template: String,
    pub predicate: String,
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchObject {
    pub id: String,
    pub class: String,
    pub category: String,
}

/// The packaged prompt templates and object roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationBench {
    pub prompts: Vec<BenchPrompt>,
    pub objects: Vec<BenchObject>,
}

pub const SLOT: &str = "{ }";

impl RelationBench {
    pub fn packaged() -> Self {
        serde_json::from_str(include_str!("../data/relation_bench.json")).expect("packaged bench parses")
    }

    pub fn instantiate(template: &str, classes: &[&str]) -> Result<String> {
        let parts: Vec<&str> = template.split(SLOT).collect();
        if parts.len() != classes.len() + 1 {
            return Err(Error::invalid(format!("template has {} slots, got {} classes", parts.len() - 1, classes.len())));
        }
        let mut out = parts[0].to_string();
        for (c, rest) in classes.iter().zip(&parts[1..]) {
            out.push_str(c);
            out.push_str(rest);
        }
        Ok(out)
    }

    /// Deterministic cases cycling through the templates. Each object gets a
    /// procedurally drawn reference image under `dir/refs/`.
    pub fn build_manifest(&self, dir: impl AsRef<Path>, num_cases: usize) -> Result<(BenchManifest, PathBuf)> {
        let dir = dir.as_ref();
        let refs = dir.join("refs");
        std::fs::create_dir_all(&refs).map_err(|e| Error::io(&refs, e))?;
        let mut used = BTreeMap::new();
        let mut cases = Vec::with_capacity(num_cases);
        let n = self.objects.len();
        for i in 0..num_cases {
            let p = &self.prompts[i % self.prompts.len()];
            let picks: Vec<&BenchObject> =
                (0..p.subjects).map(|k| &self.objects[(i * 7 + k * (n / 2 + 1)) % n]).collect();
            let classes: Vec<&str> = picks.iter().map(|o| o.class.as_str()).collect();
            let boxes: Vec<[f64; 4]> = match p.subjects {
                1 => vec![[0.15, 0.15, 0.85, 0.85]],
                _ => vec![[0.05, 0.2, 0.5, 0.9], [0.5, 0.2, 0.95, 0.9]],
            };
            let subjects = picks
                .iter()
                .zip(&boxes)
                .map(|(o, b)| {
                    used.insert(o.id.clone(), *o);
                    BenchSubject { ref_image: format!("refs/{}.png", o.id), class: o.class.clone(), bbox: Some(*b) }
                })
                .collect();
            let mut tags = vec![if p.subjects == 1 { "single" } else { "multi" }.to_string()];
            tags.extend(picks.iter().map(|o| o.category.clone()));
            cases.push(BenchCase {
                id: format!("case{:03}", i + 1),
                subjects,
                prompt: Self::instantiate(&p.template, &classes)?,
                predicate_gold: p.predicate.clone(),
                tags,
            });
        }
        for o in used.values() {
            reference_image(o).save_png(refs.join(format!("{}.png", o.id)))?;
        }
        let manifest = BenchManifest { cases };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok((manifest, path))
    }
}

/// A flat silhouette in a colour derived from the object id, with a
/// category-specific shape.
pub fn reference_image(o: &BenchObject) -> Image {
    let h = hashed_unit_vector(&format!("object:{}", o.id), 3);
    let color = [0.5 + 0.45 * h[0], 0.5 + 0.45 * h[1], 0.5 + 0.45 * h[2]];
    let round = matches!(o.category.as_str(), "pet" | "plushie" | "cartoon");
    Image::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as f64 - 31.5, y as f64 - 33.5);
        let inside = if round { dx * dx / 400.0 + dy * dy / 576.0 <= 1.0 } else { dx.abs() <= 16.0 && dy.abs() <= 24.0 };
        if inside {
            color
        } else {
            [1.0; 3]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicates_follow_the_rules() {
        assert_eq!(extract_predicate("A cat is hugging a dog in front of the mountain").unwrap(), "hugging");
        assert_eq!(
            extract_predicate("A { } is playing guitar on a park bench, serenading passersby.").unwrap(),
            "playing guitar"
        );
        assert_eq!(extract_predicate("A dog is riding a bike").unwrap(), "riding a bike");
        assert_eq!(extract_predicate("A cat is sitting back to back with a dog").unwrap(), "sitting");
        assert!(matches!(extract_predicate(""), Err(Error::NoPredicate(_))));
        assert!(matches!(extract_predicate("A cat on a table"), Err(Error::NoPredicate(_))));
    }

    #[test]
    fn instantiate_fills_slots() {
        assert_eq!(RelationBench::instantiate("A { } hugs a { }.", &["cat", "dog"]).unwrap(), "A cat hugs a dog.");
        assert!(RelationBench::instantiate("A { }.", &["cat", "dog"]).is_err());
    }

    #[test]
    fn aggregates_ignore_case_order() {
        let mk = |id: &str, v: f64| CaseScores { id: id.into(), clip_t: v, clip_r: v, clip_i: v, dino: v };
        let a = vec![mk("a", 0.1), mk("b", 0.2), mk("c", 0.3)];
        let b = vec![mk("c", 0.3), mk("a", 0.1), mk("b", 0.2)];
        assert_eq!(Aggregates::from_cases(&a), Aggregates::from_cases(&b));
    }
}
