//! Batch training and evaluation drivers behind the CLI: VQ-KD tokenizer
//! training, masked-data-modeling pretraining, answer-head fine-tuning,
//! and metric evaluation. Everything is a deterministic function of
//! (config, seed, dataset); loss traces are TSV, one line per step.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, load_image_ppm, Dataset, QAPair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masking::{mask_blockwise, sample_positions};
use crate::metrics::{aggregate, score_example, MetricsReport, Taxonomy};
use crate::model::{answer_logits, answer_select, mdm_loss, MdmBatch, MultiwayModel, TrainMode};
use crate::optim::Adam;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::vision::{
    patchify, synthetic_teacher_features, synthetic_teacher_map, vqkd_objective,
    VqkdBatch, VqkdItem, VqkdModel,
};

/// Dataset plus decoded images, answer ids, and tokenized questions.
pub struct LoadedData {
    pub dataset: Dataset,
    pub images: HashMap<String, Tensor>,
    pub base_dir: PathBuf,
}

pub fn load_data(dataset_path: &Path, image_size: usize) -> Result<LoadedData> {
    let dataset = load_dataset(dataset_path)?;
    if dataset.pairs.is_empty() {
        return Err(Error::Contract(format!(
            "dataset {} is empty",
            dataset_path.display()
        )));
    }
    let base_dir = dataset_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut images = HashMap::new();
    for pair in &dataset.pairs {
        if !images.contains_key(&pair.image) {
            let img = load_image_ppm(&base_dir.join(&pair.image), Some((image_size, image_size)))?;
            images.insert(pair.image.clone(), img);
        }
    }
    Ok(LoadedData {
        dataset,
        images,
        base_dir,
    })
}

/// Train/test indices: explicit split files when configured, otherwise a
/// seeded shuffle at the configured fraction.
pub fn resolve_split(config: &RunConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if !config.split_train.is_empty() && !config.split_test.is_empty() {
        let read_ids = |path: &str| -> Result<Vec<usize>> {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.to_string(), e))?;
            let mut ids = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let id: usize = line.parse().map_err(|_| Error::Dataset {
                    path: path.to_string(),
                    line: lineno + 1,
                    msg: format!("invalid example index {line:?}"),
                })?;
                if id >= n {
                    return Err(Error::Range {
                        what: "split example index",
                        index: id,
                        size: n,
                    });
                }
                ids.push(id);
            }
            Ok(ids)
        };
        return Ok((
            read_ids(&config.split_train)?,
            read_ids(&config.split_test)?,
        ));
    }
    Ok(split_indices(n, config.split, config.seed))
}

/// Seeded-shuffle split into (train, test) index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = crate::rng::stream(seed, "split");
    order.shuffle(&mut r);
    let cut = ((n as f64) * train_fraction).round() as usize;
    let test = order.split_off(cut.min(n));
    (order, test)
}

fn answer_id(answers: &[String], answer: &str) -> Result<usize> {
    let norm = crate::metrics::normalize_answer(answer);
    answers
        .binary_search(&norm)
        .map_err(|_| Error::Dataset {
            path: "<dataset>".into(),
            line: 0,
            msg: format!("answer {norm:?} absent from the answer vocabulary"),
        })
}

fn check_finite(loss: f64, stage: &str, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "{stage} loss is not finite at step {step}"
        )));
    }
    Ok(())
}

/// One `step<TAB>loss` line per step.
pub type Trace = Vec<String>;

/// Collects trace lines; when backed by a file, each line is written and
/// flushed as it lands so traces are diffable mid-run.
struct TraceSink {
    file: Option<std::fs::File>,
    lines: Vec<String>,
}

impl TraceSink {
    fn new(path: Option<PathBuf>) -> Result<TraceSink> {
        let file = match path {
            Some(p) => Some(
                std::fs::File::create(&p).map_err(|e| Error::io(p.display().to_string(), e))?,
            ),
            None => None,
        };
        Ok(TraceSink { file, lines: Vec::new() })
    }

    fn push(&mut self, line: String) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            use std::io::Write as _;
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io("trace file", e))?;
        }
        self.lines.push(line);
        Ok(())
    }
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub vqkd_trace: Trace,
    pub mdm_trace: Trace,
}

/// Tokenizer training against the synthetic teacher, then unified
/// mask-then-predict training at the configured ratios: 50% of question
/// tokens and 40% of patches on image-text steps, 15% of tokens on
/// text-only steps (alternating).
pub fn pretrain(
    config: &RunConfig,
    data: &LoadedData,
    vocab: &Vocab,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    config.validate()?;
    let answers = data.dataset.answers.clone();
    let mut multiway = MultiwayModel::init(
        config.multiway_config(vocab.len(), answers.len()),
        derive_seed(config.seed, "multiway"),
    )?;
    let mut vqkd = VqkdModel::init(config.vqkd_config(), derive_seed(config.seed, "vqkd"))?;
    let teacher_w = synthetic_teacher_map(
        config.vqkd_config().patch_len(),
        config.teacher_dim,
        derive_seed(config.seed, "teacher"),
    );
    let mut rng = SeededRng::new(config.seed);

    let n = data.dataset.pairs.len();
    let batch_of = |rng: &mut SeededRng, n: usize, k: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng.rng);
        order.truncate(k.min(n));
        order
    };

    // Phase 1: VQ-KD tokenizer training.
    let mut vqkd_trace = TraceSink::new(out_dir.map(|d| d.join("vqkd_loss.tsv")))?;
    {
        let mut opt = Adam::new(config.vqkd_learning_rate, config.weight_decay, &vqkd.tensors());
        for step in 0..config.pretrain_vqkd_steps {
            let idxs = batch_of(&mut rng, n, config.batch_size);
            let items: Vec<VqkdItem> = idxs
                .iter()
                .map(|&i| {
                    let pair = &data.dataset.pairs[i];
                    let grid = patchify(&data.images[&pair.image], config.patch_size)?;
                    let teacher = synthetic_teacher_features(&grid, &teacher_w)?;
                    Ok(VqkdItem {
                        patches: grid.patches,
                        teacher,
                    })
                })
                .collect::<Result<_>>()?;
            let batch = VqkdBatch { items };

            let mut g = Graph::new();
            let (bound, vars) = vqkd.bind(&mut g);
            let handles = vqkd_objective(&mut g, &vqkd, &bound, &batch, None)?;
            let mean = g.scale(handles.loss, 1.0 / batch.items.len() as f64);
            g.backward(mean)?;
            let loss = g.scalar(mean);
            check_finite(loss, "vqkd", step)?;
            for (var, tensor) in vars.iter().zip(vqkd.tensors_mut()) {
                tensor.accumulate_grad(g.grad(*var));
            }
            opt.step(&mut vqkd.tensors_mut());
            vqkd_trace.push(format!("{step}\t{loss:.12e}"))?;
        }
    }

    // Tokenize every image with the trained, now-frozen tokenizer.
    let mut codes: HashMap<String, Vec<usize>> = HashMap::new();
    for pair in &data.dataset.pairs {
        if !codes.contains_key(&pair.image) {
            let grid = patchify(&data.images[&pair.image], config.patch_size)?;
            let tokens = vqkd.tokenize(&grid)?;
            codes.insert(pair.image.clone(), tokens.codes);
        }
    }

    // Phase 2: masked data modeling.
    let mut mdm_trace = TraceSink::new(out_dir.map(|d| d.join("mdm_loss.tsv")))?;
    {
        let mut opt = Adam::new(config.learning_rate, config.weight_decay, &multiway.tensors());
        let grid_side = config.grid_side();
        for step in 0..config.pretrain_mdm_steps {
            let idxs = batch_of(&mut rng, n, config.batch_size);
            // Three image-text steps for every text-only step: the
            // visual side of the mask-then-predict task is the scarce signal.
            let image_text_step = step % 4 != 3;
            let mut step_loss = 0.0;
            let scale = 1.0 / idxs.len() as f64;
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for (bi, &i) in idxs.iter().enumerate() {
                let pair = &data.dataset.pairs[i];
                let question = vocab.encode(&pair.question);
                let qlen = question.ids.len();
                let mask_seed = derive_seed(config.seed, &format!("mdm/{step}/{bi}"));

                let (image, text_mask, patch_mask, visual) = if image_text_step {
                    let count = ((qlen as f64) * config.mask_ratio_text_pair).floor() as usize;
                    let tm = sample_positions(qlen, count, mask_seed);
                    let pm = mask_blockwise(
                        grid_side,
                        grid_side,
                        config.mask_ratio_patch,
                        config.effective_min_block(),
                        derive_seed(mask_seed, "patch"),
                    )?;
                    (
                        Some(&data.images[&pair.image]),
                        tm,
                        pm,
                        codes[&pair.image].clone(),
                    )
                } else {
                    // Monomodal text step; at least one position so the
                    // loss stays defined on short questions.
                    let count = (((qlen as f64) * config.mask_ratio_text_mono).floor() as usize)
                        .clamp(1, qlen);
                    let tm = sample_positions(qlen, count, mask_seed);
                    (None, tm, sample_positions(0, 0, 0), Vec::new())
                };

                let mut g = Graph::new();
                let (bound, vars) = multiway.bind(&mut g);
                let batch = MdmBatch {
                    image,
                    text: Some(&question),
                    text_mask,
                    patch_mask,
                    visual_codes: visual,
                };
                let mut tm = TrainMode {
                    dropout: config.dropout,
                    rng: &mut rng.rng,
                };
                let loss = mdm_loss(&mut g, &multiway, &bound, &batch, Some(&mut tm))?;
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                step_loss += g.scalar(loss) * scale;
                if grads.is_empty() {
                    grads = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
                } else {
                    for (acc, var) in grads.iter_mut().zip(&vars) {
                        for (a, b) in acc.iter_mut().zip(g.grad(*var)) {
                            *a += b;
                        }
                    }
                }
            }
            check_finite(step_loss, "mdm", step)?;
            for (tensor, grad) in multiway.tensors_mut().into_iter().zip(&grads) {
                tensor.accumulate_grad(grad);
            }
            opt.step(&mut multiway.tensors_mut());
            mdm_trace.push(format!("{step}\t{step_loss:.12e}"))?;
        }
    }

    let (seed, word_pos) = rng.state();
    let checkpoint = Checkpoint::from_state(
        config, seed, word_pos, vocab, &answers, &multiway, &vqkd,
    );
    Ok(PretrainOutput {
        checkpoint,
        vqkd_trace: vqkd_trace.lines,
        mdm_trace: mdm_trace.lines,
    })
}

pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    /// One `epoch<TAB>loss<TAB>train_accuracy` line per epoch.
    pub trace: Trace,
}

/// Supervised answer-head training (optionally with a frozen encoder) on
/// the train split; logs per-epoch train accuracy and stops early at 1.0.
pub fn finetune(
    config: &RunConfig,
    checkpoint: &Checkpoint,
    data: &LoadedData,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutput> {
    config.validate()?;
    let (mut multiway, vqkd) = checkpoint.models()?;
    let vocab = checkpoint.vocab();
    let answers = checkpoint.answers.clone();
    let mut rng = SeededRng::from_state(checkpoint.rng_seed, checkpoint.rng_word_pos);

    let (train_idx, _) = resolve_split(config, data.dataset.pairs.len())?;
    if train_idx.is_empty() {
        return Err(Error::Contract("empty train split".into()));
    }
    // Resolve every gold answer up front so vocabulary gaps fail fast.
    let gold: HashMap<usize, usize> = train_idx
        .iter()
        .map(|&i| Ok((i, answer_id(&answers, &data.dataset.pairs[i].answer)?)))
        .collect::<Result<_>>()?;

    // The answer head is always trainable; the rest only when not frozen.
    let head_names = ["answer_head.w", "answer_head.b"];
    let trainable: Vec<usize> = multiway
        .names()
        .iter()
        .enumerate()
        .filter(|(_, name)| {
            !config.freeze_encoder || head_names.contains(&name.as_str())
        })
        .map(|(i, _)| i)
        .collect();

    let mut opt = {
        let tensors = multiway.tensors();
        let subset: Vec<&Tensor> = trainable.iter().map(|&i| tensors[i]).collect();
        Adam::new(config.learning_rate, config.weight_decay, &subset)
    };

    let mut trace = TraceSink::new(out_dir.map(|d| d.join("finetune_trace.tsv")))?;
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng.rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for &i in chunk {
                let pair = &data.dataset.pairs[i];
                let question = vocab.encode(&pair.question);
                let mut g = Graph::new();
                let (bound, vars) = multiway.bind(&mut g);
                let mut tm = TrainMode {
                    dropout: config.dropout,
                    rng: &mut rng.rng,
                };
                let logits = answer_logits(
                    &mut g,
                    &multiway,
                    &bound,
                    Some(&data.images[&pair.image]),
                    &question,
                    Some(&mut tm),
                )?;
                let ce = g.cross_entropy_sum(logits, &[gold[&i]])?;
                let scaled = g.scale(ce, scale);
                g.backward(scaled)?;
                epoch_loss += g.scalar(ce);
                if grads.is_empty() {
                    grads = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
                } else {
                    for (acc, var) in grads.iter_mut().zip(&vars) {
                        for (a, b) in acc.iter_mut().zip(g.grad(*var)) {
                            *a += b;
                        }
                    }
                }
            }
            let mut tensors = multiway.tensors_mut();
            for (&ti, _) in trainable.iter().zip(0..) {
                tensors[ti].accumulate_grad(&grads[ti]);
            }
            let mut subset: Vec<&mut Tensor> = Vec::new();
            for (offset, t) in tensors.into_iter().enumerate() {
                if trainable.contains(&offset) {
                    subset.push(t);
                }
            }
            opt.step(&mut subset);
        }
        let epoch_loss = epoch_loss / train_idx.len() as f64;
        check_finite(epoch_loss, "finetune", epoch)?;

        // Train accuracy with dropout disabled.
        let all_options: Vec<usize> = (0..answers.len()).collect();
        let mut correct = 0usize;
        for &i in &train_idx {
            let pair = &data.dataset.pairs[i];
            let question = vocab.encode(&pair.question);
            let (pred, _) = answer_select(
                &multiway,
                Some(&data.images[&pair.image]),
                &question,
                &all_options,
            )?;
            if pred == gold[&i] {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / train_idx.len() as f64;
        trace.push(format!("{epoch}\t{epoch_loss:.12e}\t{accuracy:.6}"))?;
        if accuracy == 1.0 {
            break;
        }
    }

    let (seed, word_pos) = rng.state();
    let out = Checkpoint::from_state(
        config, seed, word_pos, &vocab, &answers, &multiway, &vqkd,
    );
    Ok(FinetuneOutput {
        checkpoint: out,
        trace: trace.lines,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ReportJson {
    pub n_examples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wups_0: Option<f64>,
    pub wups_9: Option<f64>,
}

impl From<&MetricsReport> for ReportJson {
    fn from(r: &MetricsReport) -> Self {
        ReportJson {
            n_examples: r.n_examples,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            wups_0: r.wups_0,
            wups_9: r.wups_9,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalJson {
    #[serde(flatten)]
    pub overall: ReportJson,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub per_type: BTreeMap<String, ReportJson>,
}

pub struct EvalOutput {
    pub report: MetricsReport,
    pub per_type: BTreeMap<String, MetricsReport>,
    /// (id, prediction, gold) per example, dataset order.
    pub predictions: Vec<(u64, String, String)>,
}

impl EvalOutput {
    pub fn to_json(&self) -> String {
        let json = EvalJson {
            overall: ReportJson::from(&self.report),
            per_type: self
                .per_type
                .iter()
                .map(|(k, v)| (k.clone(), ReportJson::from(v)))
                .collect(),
        };
        serde_json::to_string_pretty(&json).expect("report serializes")
    }

    /// Fixed-width table; values print with the same shortest-round-trip
    /// formatting the JSON uses.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<12} {}\n", "metric", "value"));
        let mut row = |k: &str, v: String| s.push_str(&format!("{k:<12} {v}\n"));
        row("n_examples", self.report.n_examples.to_string());
        row("accuracy", fmt_f64(self.report.accuracy));
        row("precision", fmt_f64(self.report.precision));
        row("recall", fmt_f64(self.report.recall));
        row("f1", fmt_f64(self.report.f1));
        row("wups_0", opt_f64(self.report.wups_0));
        row("wups_9", opt_f64(self.report.wups_9));
        for (qtype, report) in &self.per_type {
            row(
                &format!("acc[{qtype}]"),
                format!("{} (n={})", fmt_f64(report.accuracy), report.n_examples),
            );
        }
        s
    }
}

fn fmt_f64(v: f64) -> String {
    // serde_json prints f64 via the same shortest-round-trip algorithm.
    serde_json::to_string(&v).expect("finite float")
}

fn opt_f64(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "null".to_string(),
    }
}

/// Score `pairs` with the checkpoint's model. `oracle` short-circuits the
/// model and echoes gold answers (metrics sanity path).
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &LoadedData,
    subset: &[usize],
    taxonomy: Option<&Taxonomy>,
    oracle: bool,
) -> Result<EvalOutput> {
    if subset.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let (multiway, _) = checkpoint.models()?;
    let vocab = checkpoint.vocab();
    let answers = &checkpoint.answers;
    let all_options: Vec<usize> = (0..answers.len()).collect();

    let mut scores = Vec::new();
    let mut per_type: BTreeMap<String, Vec<crate::metrics::ExampleScore>> = BTreeMap::new();
    let mut predictions = Vec::new();
    for (k, &i) in subset.iter().enumerate() {
        let pair = &data.dataset.pairs[i];
        let prediction = if oracle {
            pair.answer.clone()
        } else {
            let question = vocab.encode(&pair.question);
            let options: Vec<usize> = match &pair.options {
                Some(explicit) => explicit
                    .iter()
                    .map(|a| answer_id(answers, a))
                    .collect::<Result<_>>()?,
                None => all_options.clone(),
            };
            let (pred_id, _) = answer_select(
                &multiway,
                Some(&data.images[&pair.image]),
                &question,
                &options,
            )?;
            answers[pred_id].clone()
        };
        let score = score_example(&prediction, &pair.answer, taxonomy);
        if let Some(qtype) = pair.qtype {
            per_type
                .entry(qtype.as_str().to_string())
                .or_default()
                .push(score.clone());
        }
        scores.push(score);
        predictions.push((pair.id.unwrap_or(k as u64), prediction, pair.answer.clone()));
    }

    let report = aggregate(&scores)?;
    let per_type = per_type
        .into_iter()
        .map(|(k, v)| Ok((k, aggregate(&v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalOutput {
        report,
        per_type,
        predictions,
    })
}

/// Metrics-only scoring of a predictions file against a gold dataset,
/// joined on `id` (line index when absent).
pub fn score_files(
    gold_path: &Path,
    predictions_path: &Path,
    taxonomy: Option<&Taxonomy>,
) -> Result<MetricsReport> {
    let gold = load_dataset(gold_path)?;
    let text = std::fs::read_to_string(predictions_path)
        .map_err(|e| Error::io(predictions_path.display().to_string(), e))?;

    #[derive(serde::Deserialize)]
    struct PredLine {
        id: u64,
        prediction: String,
    }
    let mut preds: HashMap<u64, String> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredLine = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: predictions_path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        preds.insert(p.id, p.prediction);
    }

    let mut scores = Vec::new();
    for (k, pair) in gold.pairs.iter().enumerate() {
        let id = pair.id.unwrap_or(k as u64);
        let Some(prediction) = preds.get(&id) else {
            return Err(Error::Dataset {
                path: predictions_path.display().to_string(),
                line: 0,
                msg: format!("no prediction for example id {id}"),
            });
        };
        scores.push(score_example(prediction, &pair.answer, taxonomy));
    }
    aggregate(&scores)
}

/// Build or load the text vocabulary for a dataset. An explicit path wins
/// when the file exists; otherwise the vocabulary is built from the
/// dataset's questions and answers.
pub fn vocab_for(config: &RunConfig, dataset: &Dataset) -> Result<Vocab> {
    if !config.vocab.is_empty() && Path::new(&config.vocab).exists() {
        return Vocab::load(Path::new(&config.vocab));
    }
    Vocab::build(&crate::data::corpus_lines(dataset), config.vocab_max)
}

/// Convenience wrapper for `QAPair` lists in tests and the CLI.
pub fn all_indices(pairs: &[QAPair]) -> Vec<usize> {
    (0..pairs.len()).collect()
}
