//! Dataset ingestion, PPM image I/O, and the synthetic toy dataset.
//!
//! Datasets are JSONL, one record per line: `image`, `question`, `answer`,
//! optional `type` (Object|Number|Color|Location), optional `id`, optional
//! `options`. Images are binary PPM (P6, maxval 255) — bit-exact and
//! dependency-free, which is all the synthetic pipeline needs.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionType {
    Object,
    Number,
    Color,
    Location,
}

impl QuestionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::Object => "Object",
            QuestionType::Number => "Number",
            QuestionType::Color => "Color",
            QuestionType::Location => "Location",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAPair {
    #[serde(default)]
    pub id: Option<u64>,
    pub image: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<QuestionType>,
    /// Per-example candidate answers; the global answer vocabulary
    /// otherwise serves as the option set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

/// Parsed dataset plus the answer vocabulary: the sorted set of distinct
/// answers in file order of first occurrence is NOT used — sorting keeps
/// the id assignment stable under shuffles.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<QAPair>,
    pub answers: Vec<String>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: QAPair = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if pair.question.trim().is_empty() || pair.answer.trim().is_empty() {
            return Err(Error::Dataset {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "question and answer must be nonempty".into(),
            });
        }
        pairs.push(pair);
    }
    let answers: Vec<String> = pairs
        .iter()
        .map(|p| crate::metrics::normalize_answer(&p.answer))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(Dataset { pairs, answers })
}

// ── PPM (P6) ────────────────────────────────────────────────────────────

fn ppm_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Read a binary PPM into an H×W×3 tensor scaled to [0, 1]. The size must
/// match `expected` exactly when given — there is no resizing.
pub fn load_image_ppm(path: &Path, expected: Option<(usize, usize)>) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(ppm_err(path, "expected binary PPM magic P6"));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| ppm_err(path, "bad width"))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| ppm_err(path, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| ppm_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(ppm_err(path, format!("maxval {maxval}, only 255 supported")));
    }
    if let Some((eh, ew)) = expected {
        if (h, w) != (eh, ew) {
            return Err(ppm_err(
                path,
                format!("image is {h}x{w}, expected {eh}x{ew}"),
            ));
        }
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(ppm_err(
            path,
            format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Write an H×W×3 tensor with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Contract(format!(
            "write_ppm expects HxWx3, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── synthetic dataset ───────────────────────────────────────────────────

const COLORS: [(&str, [f64; 3]); 4] = [
    ("đỏ", [1.0, 0.1, 0.1]),
    ("xanh", [0.1, 0.3, 1.0]),
    ("vàng", [1.0, 0.9, 0.1]),
    ("tím", [0.7, 0.1, 0.9]),
];
const SHAPES: [&str; 2] = ["vuông", "tròn"];
const SLOTS: [&str; 4] = ["trên", "dưới", "trái", "phải"];
const COUNTS: [&str; 3] = ["một", "hai", "ba"];

fn question_text(qtype: QuestionType) -> &'static str {
    match qtype {
        QuestionType::Object => "vật thể trong ảnh là hình gì",
        QuestionType::Color => "vật thể trong ảnh có màu gì",
        QuestionType::Number => "có bao nhiêu vật thể trong ảnh",
        QuestionType::Location => "vật thể nằm ở phía nào",
    }
}

/// Slot centers: top, bottom, left, right halves of the square canvas.
fn slot_center(slot: usize, size: usize) -> (usize, usize) {
    let q = size / 4;
    match slot {
        0 => (q, size / 2),
        1 => (3 * q, size / 2),
        2 => (size / 2, q),
        _ => (size / 2, 3 * q),
    }
}

fn draw_shape(img: &mut Tensor, shape: usize, color: [f64; 3], center: (usize, usize), r: usize) {
    let size = img.shape()[0];
    let (cr, cc) = center;
    for row in cr.saturating_sub(r)..(cr + r).min(size) {
        for col in cc.saturating_sub(r)..(cc + r).min(size) {
            let inside = match shape {
                0 => true, // filled square
                _ => {
                    // Disk at 3/4 the square's half-width: the corner and
                    // area contrast keeps the two shapes separable at
                    // patch resolution.
                    let rr = 3.0 * r as f64 / 4.0;
                    let dr = row as f64 - cr as f64;
                    let dc = col as f64 - cc as f64;
                    dr * dr + dc * dc <= rr * rr
                }
            };
            if inside {
                let base = (row * size + col) * 3;
                img.data_mut()[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Render one synthetic scene: `count` copies of one shape in one color at
/// distinct slots on a dark background.
pub fn render_scene(
    size: usize,
    shape: usize,
    color: usize,
    slots: &[usize],
) -> Tensor {
    let mut img = Tensor::new(vec![size, size, 3], vec![0.05; size * size * 3]).unwrap();
    for &slot in slots {
        draw_shape(
            &mut img,
            shape,
            COLORS[color].1,
            slot_center(slot, size),
            size / 4,
        );
    }
    img
}

/// Deterministic toy dataset: colored shapes with templated questions over
/// the four question types and single-token answers. Emits `data.jsonl`,
/// `imgs/*.ppm`, and a `taxonomy.tsv` covering every answer.
pub fn gen_synthetic(out_dir: &Path, n: usize, image_size: usize, seed: u64) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Contract("gen_synthetic needs n >= 1".into()));
    }
    let imgs = out_dir.join("imgs");
    std::fs::create_dir_all(&imgs).map_err(|e| Error::io(imgs.display().to_string(), e))?;
    let mut r = rng::stream(seed, "gen-synth");

    let jsonl_path = out_dir.join("data.jsonl");
    let mut jsonl = std::fs::File::create(&jsonl_path)
        .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
    let mut strata: std::collections::BTreeMap<String, Vec<usize>> = Default::default();

    // Question types and their answer values cycle so every answer
    // appears equally often and random splits keep full coverage; the
    // sampled factor space stays small (2 colors, 2 shapes, counts 1-2,
    // top/bottom positions) while the taxonomy lists the full palette.
    // Shape and location need the most evidence; color and count read off
    // near-linear global statistics, so they appear less often.
    const TYPE_PATTERN: [QuestionType; 8] = [
        QuestionType::Object,
        QuestionType::Location,
        QuestionType::Object,
        QuestionType::Location,
        QuestionType::Number,
        QuestionType::Color,
        QuestionType::Object,
        QuestionType::Location,
    ];
    for i in 0..n {
        let qtype = TYPE_PATTERN[i % TYPE_PATTERN.len()];
        let cycle = i / TYPE_PATTERN.len() * 3 + [0, 0, 1, 1, 0, 0, 2, 2][i % TYPE_PATTERN.len()];
        let mut shape = r.gen_range(0..SHAPES.len());
        let mut color = r.gen_range(0..2);
        let mut count = r.gen_range(1..=2);
        let mut first_slot = r.gen_range(0..2);
        match qtype {
            QuestionType::Object => shape = cycle % 2,
            QuestionType::Color => color = cycle % 2,
            QuestionType::Number => count = cycle % 2 + 1,
            QuestionType::Location => {
                count = 1;
                first_slot = cycle % 2;
            }
        }
        // A second object fills the opposite half, never occluding.
        let mut slot_ids = vec![first_slot];
        if count == 2 {
            slot_ids.push(1 - first_slot);
        }

        let answer = match qtype {
            QuestionType::Object => SHAPES[shape],
            QuestionType::Color => COLORS[color].0,
            QuestionType::Number => COUNTS[count - 1],
            QuestionType::Location => SLOTS[slot_ids[0]],
        };
        let img = render_scene(image_size, shape, color, &slot_ids);
        let img_name = format!("imgs/img_{i:04}.ppm");
        write_ppm(&out_dir.join(&img_name), &img)?;

        let pair = QAPair {
            id: Some(i as u64),
            image: img_name,
            question: question_text(qtype).to_string(),
            answer: answer.to_string(),
            qtype: Some(qtype),
            options: None,
        };
        let line = serde_json::to_string(&pair).expect("QAPair serializes");
        writeln!(jsonl, "{line}").map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
        strata
            .entry(format!("{}/{}", qtype.as_str(), answer))
            .or_default()
            .push(i);
    }

    // Stratified half/half split files: every (type, answer) class is
    // represented on both sides whenever it has at least two examples.
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for ids in strata.values() {
        let cut = ids.len() / 2;
        train_ids.extend(&ids[..ids.len() - cut]);
        test_ids.extend(&ids[ids.len() - cut..]);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let write_ids = |name: &str, ids: &[usize]| -> Result<()> {
        let path = out_dir.join(name);
        let body = ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    };
    write_ids("split_train.txt", &train_ids)?;
    write_ids("split_test.txt", &test_ids)?;

    // Taxonomy over every possible answer token.
    let tax_path = out_dir.join("taxonomy.tsv");
    let mut tax = String::new();
    for cat in ["màu", "hình", "số", "vị_trí"] {
        tax.push_str(&format!("sự_vật\t{cat}\n"));
    }
    for (color, _) in COLORS {
        tax.push_str(&format!("màu\t{color}\n"));
    }
    for shape in SHAPES {
        tax.push_str(&format!("hình\t{shape}\n"));
    }
    for count in COUNTS {
        tax.push_str(&format!("số\t{count}\n"));
    }
    for slot in SLOTS {
        tax.push_str(&format!("vị_trí\t{slot}\n"));
    }
    std::fs::write(&tax_path, tax).map_err(|e| Error::io(tax_path.display().to_string(), e))?;

    Ok(jsonl_path)
}

/// Question and answer lines of a dataset, the tokenizer-training corpus.
pub fn corpus_lines(dataset: &Dataset) -> Vec<String> {
    let mut lines: Vec<String> = dataset.pairs.iter().map(|p| p.question.clone()).collect();
    lines.extend(dataset.pairs.iter().map(|p| p.answer.clone()));
    lines
}
