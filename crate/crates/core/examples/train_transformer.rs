//! Train CT-HGR-V1 on one fold of a synthetic subject, then look inside:
//! class-token attention of the first layer and the cosine similarity of
//! the learned positional embeddings.
//!
//! cargo run --release --example train_transformer

use cthgr::eval::{class_indices, make_folds, normalise, prepare_subject, ExperimentConfig};
use cthgr::ingest::synthesize_dataset;
use cthgr::model::{positional_cosine_matrix, CtHgr};
use cthgr::train::{accuracy, predict, train};

fn main() -> cthgr::Result<()> {
    let cfg = ExperimentConfig::from_json(include_bytes!("../../../configs/synthetic_v1.json"))?;
    let cthgr::eval::DataSource::Synthetic { spec, .. } = &cfg.data else { unreachable!() };
    let subject = prepare_subject(&synthesize_dataset(spec)?, &cfg, false)?;
    let fold = make_folds(&subject.envelope, &cfg.folds)?.remove(0);
    let batch = normalise(&subject.envelope, &fold.train, cfg.preprocess.mu)?;
    let labels = class_indices(&batch.labels, cfg.class_count())?;
    let xs = |idx: &[usize]| idx.iter().map(|&i| batch.window(i)).collect::<Vec<_>>();
    let ys = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();

    let mut model = CtHgr::new(cfg.model_config(cfg.model.preset)?, 1)?;
    let report = train(&mut model, &xs(&fold.train), &ys(&fold.train), &cfg.train)?;
    let test = accuracy(&predict(&model, &xs(&fold.test), 64)?, &ys(&fold.test));
    println!(
        "{}: loss {:.3} → {:.3}, train {:.2}%, test {test:.2}%",
        fold.name,
        report.epoch_loss[0],
        report.epoch_loss.last().unwrap(),
        report.train_accuracy
    );

    let (tape, trace) = model.trace(&xs(&fold.test[..1]))?;
    let att = tape.value(trace.attention[0]);
    let s = model.config.seq_len();
    let cls_row: Vec<String> = att.data()[..s].iter().map(|a| format!("{a:.3}")).collect();
    println!("head 0, class-token attention: [{}]", cls_row.join(", "));

    let cos = positional_cosine_matrix(&model)?;
    for row in &cos {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("{}", cells.join(" "));
    }
    Ok(())
}
