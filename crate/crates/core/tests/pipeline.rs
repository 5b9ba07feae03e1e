use dclstm::data::{read_corpus, synth_dataset, train_val_split, write_corpus, Grouping, VideoClip};
use dclstm::model::{build, ModelConfig};
use dclstm::train::{evaluate, load_checkpoint_for, train, TrainConfig};

/// Ridge-regression classifier on raw pixels, solved in dual form. Returns
/// the best validation accuracy over a range of ridge strengths, so the
/// probe gets every advantage.
fn linear_probe(train: &[VideoClip], val: &[VideoClip], classes: usize) -> f64 {
    let n = train.len();
    let dim = train[0].frames.len();
    let mut mean = vec![0.0f64; dim];
    for c in train {
        mean.iter_mut().zip(c.frames.data()).for_each(|(m, &v)| *m += v as f64 / n as f64);
    }
    let center =
        |c: &VideoClip| -> Vec<f64> { c.frames.data().iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(center).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = xs.iter().map(|a| xs.iter().map(|b| dot(a, b)).collect()).collect();
    let scale = (0..n).map(|i| gram[i][i]).sum::<f64>() / n as f64;
    let val_kernels: Vec<Vec<f64>> = val
        .iter()
        .map(|c| {
            let v = center(c);
            xs.iter().map(|x| dot(x, &v)).collect()
        })
        .collect();

    let mut best = 0.0f64;
    for ridge in [1e-4, 1e-2, 1.0] {
        // Solve (K + λI) A = Y by Gaussian elimination with partial pivoting.
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = gram[i].clone();
                row[i] += ridge * scale;
                row.extend((0..classes).map(|k| (train[i].label == k) as u8 as f64));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    let pivot_row = m[col].clone();
                    m[r].iter_mut().zip(&pivot_row).for_each(|(a, p)| *a -= f * p);
                }
            }
        }
        let alpha: Vec<Vec<f64>> = (0..n).map(|i| (0..classes).map(|k| m[i][n + k] / m[i][i]).collect()).collect();
        let predict =
            |kv: &[f64]| argmax(&(0..classes).map(|k| (0..n).map(|i| kv[i] * alpha[i][k]).sum()).collect::<Vec<_>>());
        let fit = (0..n).filter(|&i| predict(&gram[i]) == train[i].label).count();
        if ridge < 1e-3 {
            assert!(fit as f64 / n as f64 > 0.9, "probe failed to fit its training set");
        }
        let hits = val.iter().zip(&val_kernels).filter(|(c, kv)| predict(kv) == c.label).count();
        best = best.max(hits as f64 / val.len() as f64);
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

#[test]
fn synthetic_task_defeats_a_linear_probe() {
    let clips = synth_dataset(200, 4, 16, 32, 32, 0).unwrap();
    let (tr, va) = train_val_split(clips, 0.2, 0, Grouping::BySource).unwrap();
    let acc = linear_probe(&tr, &va, 4);
    assert!(acc < 0.6, "linear probe reached {acc}");
}

#[test]
fn corpus_round_trip_then_train_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let clips = synth_dataset(24, 4, 8, 16, 16, 1).unwrap();
    write_corpus(&dir.path().join("data"), &clips).unwrap();
    let loaded = read_corpus(&dir.path().join("data")).unwrap();
    assert_eq!(loaded, clips);

    let model = ModelConfig {
        frames: 8,
        height: 16,
        width: 16,
        conv3d_channels: vec![4, 4],
        convlstm_hidden: 4,
        head_channels: vec![4, 4],
        deformable_per_quartile: 1,
        ..ModelConfig::tiny()
    };
    let ckpt = dir.path().join("m.ckpt");
    let cfg = TrainConfig { epochs: 2, checkpoint_path: Some(ckpt.clone()), ..TrainConfig::default() };
    let (tr, va) = train_val_split(loaded, 0.25, 0, Grouping::BySource).unwrap();
    let mut params = build(&model).unwrap();
    let history = train(&mut params, &tr, &va, &cfg).unwrap();
    assert_eq!(history.len(), 2);
    let reloaded = load_checkpoint_for(&ckpt, &model).unwrap();
    let a = evaluate(&params, &va).unwrap();
    let b = evaluate(&reloaded, &va).unwrap();
    assert_eq!(a, b);
    assert_eq!(history[1].val.as_ref(), Some(&a));
}

#[test]
fn shipped_config_is_the_ablation_setup() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.cfg")).unwrap();
    let cfg = dclstm::train::RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.model, ModelConfig::tiny());
    assert_eq!(cfg.train, TrainConfig { epochs: 25, learning_rate: 2e-3, ..TrainConfig::default() });
}
