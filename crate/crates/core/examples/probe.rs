use multiway::checkpoint::Checkpoint;
use multiway::graph::Graph;
use multiway::model::{encode, EncodeInput};
use multiway::train;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Checkpoint::load(Path::new(&args[1])).unwrap();
    let data = train::load_data(Path::new(&ckpt.config.dataset), ckpt.config.image_size).unwrap();
    let (model, _) = ckpt.models().unwrap();
    let vocab = ckpt.vocab();
    for pair in &data.dataset.pairs {
        let q = vocab.encode(&pair.question);
        let mut g = Graph::new();
        let (bound, _) = model.bind(&mut g);
        let input = EncodeInput::image_text(Some(&data.images[&pair.image]), Some(&q));
        let seq = encode(&mut g, &model, &bound, &input, None).unwrap();
        let out = g.value(seq.output);
        let d = model.config.d_model;
        let cls: Vec<String> = out[..d].iter().map(|v| format!("{v:.6}")).collect();
        println!("{}\t{}\t{}\t{}", pair.id.unwrap(), pair.qtype.unwrap().as_str(), pair.answer, cls.join(","));
    }
}
