use std::time::Instant;

use duet_core::data::{load_cifar10_bin, load_mnist, shard_by_label, Dataset, Split};
use duet_core::nn::{simulate, Model, ModelSpec};
use duet_core::party::run_digest;
use duet_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::opts::{Hyper, SimulateArgs};
use crate::report::Report;

/// Training and test sets for `spec`, trimmed to the requested limits.
pub fn load_data(spec: &ModelSpec, hyper: &Hyper, split: Split) -> Result<Dataset> {
    let ds = if spec.input == [3, 32, 32] {
        let names: Vec<String> = match split {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        };
        let paths: Vec<_> = names.iter().map(|n| hyper.data.join(n)).collect();
        load_cifar10_bin(&paths.iter().map(|p| p.as_path()).collect::<Vec<_>>(), split)?
    } else {
        load_mnist(&hyper.data, split)?
    };
    let limit = match split {
        Split::Train => hyper.train_limit,
        Split::Test => hyper.test_limit,
    };
    Ok(match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    })
}

/// Split `ds` across `k` owners: by label when `labels_per_do > 0`,
/// otherwise uniformly at random.
pub fn split_owners(ds: &Dataset, k: usize, labels_per_do: usize, seed: u64) -> Result<Vec<Dataset>> {
    if k == 0 {
        return Err(Error::Config("need at least one data owner".into()));
    }
    if labels_per_do > 0 {
        return shard_by_label(ds, k, labels_per_do, seed);
    }
    if k == 1 {
        return Ok(vec![ds.clone()]);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let per = ds.len() / k;
    Ok((0..k).map(|i| ds.subset(&order[i * per..(i + 1) * per])).collect())
}

pub fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the serialized model.
pub fn model_digest(model: &Model) -> Result<String> {
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn run(a: &SimulateArgs) -> Result<bool> {
    a.common.init_threads()?;
    let start = Instant::now();
    let ring = a.common.params.ring();
    let spec = ModelSpec::by_name(&a.hyper.model)?;
    let cfg = a.hyper.train_config(a.common.seed)?;
    let train = load_data(&spec, &a.hyper, Split::Train)?;
    let test = load_data(&spec, &a.hyper, Split::Test)?;
    let shards = split_owners(&train, a.dos, a.labels_per_do, a.common.seed)?;
    let used = a.use_dos.unwrap_or(shards.len()).clamp(1, shards.len());
    let shards = &shards[..used];

    let mut rep = Report::new("simulate", a.common.out.as_deref());
    rep.set("model", spec.name.clone());
    rep.set("train_samples", shards.iter().map(Dataset::len).sum::<usize>());
    rep.set("test_samples", test.len());
    rep.set("data_owners", used);
    let mut model = Model::init(spec, a.common.seed)?;
    let mut epochs = Vec::new();
    let stats = simulate(&mut model, &ring, &cfg, shards, Some(&test), |e| {
        let acc = e.test_accuracy.unwrap_or(f64::NAN);
        println!(
            "epoch={} steps={} loss={:.5} test_accuracy={:.4} seconds={:.1}",
            e.epoch, e.steps, e.mean_loss, acc, e.seconds
        );
        epochs.push(json!({
            "epoch": e.epoch, "steps": e.steps, "mean_loss": e.mean_loss,
            "test_accuracy": acc, "seconds": e.seconds,
        }));
    })?;
    let last = stats.last().and_then(|e| e.test_accuracy).unwrap_or(f64::NAN);
    let best = stats.iter().filter_map(|e| e.test_accuracy).fold(f64::NAN, f64::max);
    rep.set("final_accuracy", last);
    rep.set("best_accuracy", best);
    rep.set("seconds", start.elapsed().as_secs_f64());
    rep.set_quiet("epochs", epochs);

    let mut outputs = vec![];
    let save = a
        .save_model
        .clone()
        .or_else(|| a.common.out.as_ref().map(|d| d.join("model.pmdl")));
    if let Some(path) = save {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        model.save(&path)?;
        rep.set("model_file", path.display().to_string());
        outputs.push(path.display().to_string());
    }
    rep.finish(json!({
        "command": "simulate",
        "config": { "common": a.common.json(), "hyper": a.hyper.json(), "dos": a.dos,
                    "labels_per_do": a.labels_per_do, "use_dos": used },
        "seeds": { "init": a.common.seed, "order": a.common.seed, "shards": a.common.seed },
        "digests": { "run": hex(&run_digest(&ring, &a.common.params.he())), "model": model_digest(&model)? },
        "outputs": outputs,
    }))?;
    Ok(true)
}
