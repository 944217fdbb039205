//! The two comparison models on one fold of a synthetic subject: a linear
//! SVM on RMS/ZC/SSC/WL features and the 3D CNN on raw windows.
//!
//! cargo run --release --example baselines

use cthgr::baselines::{extract_features, Cnn3d, Cnn3dConfig, LinearSvm, SvmConfig};
use cthgr::eval::{class_indices, make_folds, normalise, prepare_subject, ExperimentConfig};
use cthgr::ingest::synthesize_dataset;
use cthgr::train::{accuracy, predict, train, Classifier};

fn main() -> cthgr::Result<()> {
    let cfg = ExperimentConfig::from_json(include_bytes!("../../../configs/synthetic_cnn3d.json"))?;
    let cthgr::eval::DataSource::Synthetic { spec, .. } = &cfg.data else { unreachable!() };
    let subject = prepare_subject(&synthesize_dataset(spec)?, &cfg, false)?;
    let fold = make_folds(&subject.envelope, &cfg.folds)?.remove(2);
    let b = normalise(&subject.envelope, &fold.train, cfg.preprocess.mu)?;
    let labels = class_indices(&b.labels, cfg.class_count())?;
    let ys = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();

    let feats = |idx: &[usize]| -> cthgr::Result<Vec<Vec<f64>>> {
        idx.iter().map(|&i| extract_features(b.window(i), b.frame_len(), 0.0)).collect()
    };
    let (ftr, fte) = (feats(&fold.train)?, feats(&fold.test)?);
    let refs: Vec<&[f64]> = ftr.iter().map(Vec::as_slice).collect();
    let svm = LinearSvm::train(&refs, &ys(&fold.train), cfg.class_count(), &SvmConfig::default())?;
    let pred: Vec<usize> = fte.iter().map(|f| svm.predict(f)).collect();
    println!("SVM   {}: test {:.2}%", fold.name, accuracy(&pred, &ys(&fold.test)));

    let xs = |idx: &[usize]| idx.iter().map(|&i| b.window(i)).collect::<Vec<_>>();
    let c = Cnn3dConfig::new(b.window_len, b.n_horizontal, b.n_vertical, cfg.class_count());
    println!("3D CNN stages {:?}", c.stage_shapes()?);
    let mut cnn = Cnn3d::new(c, 1)?;
    println!("3D CNN parameters: {}", cnn.params().scalar_count());
    let r = train(&mut cnn, &xs(&fold.train), &ys(&fold.train), &cfg.train)?;
    let test = accuracy(&predict(&cnn, &xs(&fold.test), 64)?, &ys(&fold.test));
    println!("3D CNN {}: train {:.2}%, test {test:.2}%", fold.name, r.train_accuracy);
    Ok(())
}
