//! The `train` and `prep` subcommands: one party of private training, or
//! both parties in one process.

use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Instant;

use duet_core::data::{Dataset, Split};
use duet_core::linear::DpConfig;
use duet_core::nn::{
    accuracy, data_owner_step, encode_batch, load_banks, model_owner_step, prepare_banks, recv_continue, round_robin,
    save_banks, send_continue, LinearMode, Model, ModelSpec, Network, Private,
};
use duet_core::party::{establish, run_digest, Party};
use duet_core::prep::{BankPlan, LayerBanks};
use duet_core::ring::Role;
use duet_core::transport::{memory_pair, tcp_accept, tcp_connect, Census, Session};
use duet_core::{Error, Result};
use log::info;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::opts::{ModeArg, RoleArg, TrainArgs};
use crate::report::Report;
use crate::simulate::{hex, load_data, model_digest, split_owners};

type Banks = Vec<Option<LayerBanks>>;

/// Everything both parties must agree on, compared during the handshake.
fn run_config(a: &TrainArgs, prep_only: bool) -> String {
    let banks = match (prep_only, &a.bank_dir) {
        (true, _) => "store",
        (false, Some(_)) => "load",
        (false, None) => "session",
    };
    format!(
        "{} model={} batch={} mode={:?} trunc={:?} masks={} scalars={:?} sigma={} clip={} banks={banks}",
        if prep_only { "prep" } else { "train" },
        a.hyper.model,
        a.hyper.batch,
        a.mode,
        a.hyper.trunc,
        a.masks_m,
        a.scalars,
        a.hyper.sigma,
        a.hyper.clip_c,
    )
    .to_lowercase()
}

fn connect(a: &TrainArgs, mut session: Session, prep_only: bool) -> Result<Party> {
    if a.transcript {
        session.record_transcript();
    }
    establish(
        session,
        a.common.params.ring(),
        a.ot,
        a.common.params.he(),
        &run_config(a, prep_only),
        a.common.seed,
    )
}

fn transcript_digest(p: &Party) -> String {
    let mut h = Sha256::new();
    for (kind, payload) in p.session.transcript() {
        h.update(kind.to_le_bytes());
        h.update((payload.len() as u64).to_le_bytes());
        h.update(payload);
    }
    hex(&h.finalize())
}

fn bank_dir(a: &TrainArgs, role: Role, index: usize) -> Option<PathBuf> {
    a.bank_dir.as_ref().map(|d| {
        if role == Role::ModelOwner && a.dos > 1 {
            d.join(format!("do{index}"))
        } else {
            d.clone()
        }
    })
}

fn bank_plan(a: &TrainArgs) -> BankPlan {
    BankPlan {
        masks: a.masks_m,
        scalars: a.scalars,
        reuse_cap: None,
        need_input_grad: true,
    }
}

/// Banks for one session: loaded from disk, or produced with the peer.
fn obtain_banks(p: &mut Party, a: &TrainArgs, net: &Network, index: usize, prep_only: bool) -> Result<Banks> {
    let dir = bank_dir(a, p.role, index);
    match dir {
        Some(d) if !prep_only => load_banks(&d, p.role, net, a.hyper.batch),
        _ => {
            let banks = prepare_banks(p, net, a.hyper.batch, &bank_plan(a))?;
            if prep_only {
                let d = dir.ok_or_else(|| Error::Config("prep needs --bank-dir".into()))?;
                std::fs::create_dir_all(&d)?;
                save_banks(&banks, &d)?;
            }
            Ok(banks)
        }
    }
}

fn manifest(a: &TrainArgs, role: &str, prep_only: bool, outputs: Vec<String>) -> Value {
    json!({
        "command": if prep_only { "prep" } else { "train" },
        "role": role,
        "config": {
            "common": a.common.json(),
            "hyper": a.hyper.json(),
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "ot": format!("{:?}", a.ot).to_lowercase(),
            "masks_m": a.masks_m,
            "scalars": format!("{:?}", a.scalars).to_lowercase(),
            "bank_dir": a.bank_dir,
            "steps": a.steps,
            "dos": a.dos,
            "do_index": a.do_index,
            "labels_per_do": a.labels_per_do,
            "model_file": a.model_file,
            "session_config": run_config(a, prep_only),
        },
        "seeds": { "session": a.common.seed, "init": a.common.seed, "order": a.common.seed },
        "digests": { "run": hex(&run_digest(&a.common.params.ring(), &a.common.params.he())) },
        "outputs": outputs,
    })
}

fn out_dir(a: &TrainArgs, sub: &str) -> Option<PathBuf> {
    a.common.out.as_ref().map(|d| if a.role == RoleArg::Local { d.join(sub) } else { d.clone() })
}

fn dp(a: &TrainArgs) -> Result<DpConfig> {
    a.hyper.dp()
}

/// Model owner: serve every data owner in turn until all have finished.
fn model_owner(a: &TrainArgs, mut parties: Vec<Party>, prep_only: bool, prefix: &str) -> Result<bool> {
    let start = Instant::now();
    let ring = a.common.params.ring();
    let spec = ModelSpec::by_name(&a.hyper.model)?;
    let cfg = a.hyper.train_config(a.common.seed)?;
    let mut model = match &a.model_file {
        Some(f) => Model::load(f)?,
        None => Model::init(spec.clone(), a.common.seed)?,
    };
    if model.spec != spec {
        return Err(Error::Config(format!("checkpoint holds {}, not {}", model.spec.name, spec.name)));
    }
    let out = out_dir(a, "mo");
    let mut rep = Report::with_prefix("train", out.as_deref(), prefix);
    rep.set("role", "mo");
    rep.set("mode", format!("{:?}", a.mode).to_lowercase());
    rep.set("data_owners", parties.len());

    let net = model.quantize(&ring)?;
    let mut banks = Vec::new();
    let prep_start = Instant::now();
    for (i, p) in parties.iter_mut().enumerate() {
        banks.push(match a.mode {
            ModeArg::Prep => Some(obtain_banks(p, a, &net, i, prep_only)?),
            ModeArg::Fullhe => None,
        });
    }
    rep.set("offline_seconds", prep_start.elapsed().as_secs_f64());
    let offline: Vec<Census> = parties.iter().map(|p| p.session.census().clone()).collect();
    let mut total_offline = Census::default();
    offline.iter().for_each(|c| total_offline.merge(c));
    rep.census("offline", &total_offline);
    if prep_only {
        rep.set("seconds", start.elapsed().as_secs_f64());
        let outputs = a.bank_dir.iter().map(|d| d.display().to_string()).collect();
        rep.finish(manifest(a, "mo", true, outputs))?;
        return Ok(true);
    }

    let mut engines: Vec<Private> = parties
        .iter_mut()
        .zip(banks)
        .map(|(p, b)| {
            let mode = b.map_or(LinearMode::FullHe, LinearMode::Prep);
            Ok(Private::new(p, mode, a.hyper.trunc, dp(a)?))
        })
        .collect::<Result<_>>()?;
    let online_start = Instant::now();
    let mut active = vec![true; engines.len()];
    let mut steps = 0usize;
    let mut per_do = vec![0usize; engines.len()];
    while active.iter().any(|&x| x) {
        for (i, e) in engines.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            if !recv_continue(e.party)? {
                active[i] = false;
                continue;
            }
            model_owner_step(e, &mut model, &cfg)?;
            steps += 1;
            per_do[i] += 1;
        }
    }
    let online_seconds = online_start.elapsed().as_secs_f64();
    rep.set("steps", steps);
    rep.set_quiet("steps_per_do", per_do);
    rep.set("online_seconds", online_seconds);
    let mut online = Census::default();
    for (e, before) in engines.iter().zip(&offline) {
        online.merge(&e.party.session.census().since(before));
    }
    rep.census("online", &online);
    if a.transcript {
        let digests: Vec<String> = engines.iter().map(|e| transcript_digest(e.party)).collect();
        rep.set("transcript_sha256", digests.join(","));
    }
    drop(engines);

    let mut outputs = Vec::new();
    if let Some(d) = &out {
        std::fs::create_dir_all(d)?;
        let path = d.join("model.pmdl");
        model.save(&path)?;
        rep.set("model_file", path.display().to_string());
        outputs.push(path.display().to_string());
    }
    if a.eval {
        let test = load_data(&spec, &a.hyper, Split::Test)?;
        rep.set("test_accuracy", accuracy(&ring, &model.quantize(&ring)?, &test)?);
    }
    rep.set("seconds", start.elapsed().as_secs_f64());
    let digest = model_digest(&model)?;
    rep.set("model_sha256", digest.clone());
    let mut m = manifest(a, "mo", false, outputs);
    m["digests"]["model"] = digest.into();
    rep.finish(m)?;
    Ok(true)
}

/// This data owner's shard of the training set.
fn owned_data(a: &TrainArgs, spec: &ModelSpec) -> Result<Dataset> {
    let train = load_data(spec, &a.hyper, Split::Train)?;
    let mut shards = split_owners(&train, a.dos, a.labels_per_do, a.common.seed)?;
    if a.do_index >= shards.len() {
        return Err(Error::Config(format!("--do-index {} with {} shards", a.do_index, shards.len())));
    }
    Ok(shards.swap_remove(a.do_index))
}

/// Data owner: drive the steps over the local shard and report the loss curve.
fn data_owner(a: &TrainArgs, mut party: Party, prep_only: bool, prefix: &str) -> Result<bool> {
    let start = Instant::now();
    let ring = a.common.params.ring();
    let spec = ModelSpec::by_name(&a.hyper.model)?;
    let net = Network::peer(spec.clone())?;
    let out = out_dir(a, "do");
    let mut rep = Report::with_prefix(if prep_only { "prep" } else { "train" }, out.as_deref(), prefix);
    rep.set("role", "do");
    rep.set("mode", format!("{:?}", a.mode).to_lowercase());

    let prep_start = Instant::now();
    let banks = match a.mode {
        ModeArg::Prep => Some(obtain_banks(&mut party, a, &net, a.do_index, prep_only)?),
        ModeArg::Fullhe => None,
    };
    rep.set("offline_seconds", prep_start.elapsed().as_secs_f64());
    let offline = party.session.census().clone();
    rep.census("offline", &offline);
    if prep_only {
        rep.set("seconds", start.elapsed().as_secs_f64());
        let outputs = a.bank_dir.iter().map(|d| d.display().to_string()).collect();
        rep.finish(manifest(a, "do", true, outputs))?;
        return Ok(true);
    }

    let data = owned_data(a, &spec)?;
    rep.set("train_samples", data.len());
    let cap = a.steps.unwrap_or(usize::MAX);
    let mode = banks.map_or(LinearMode::FullHe, LinearMode::Prep);
    let mut engine = Private::new(&mut party, mode, a.hyper.trunc, dp(a)?);
    let online_start = Instant::now();
    let mut losses = Vec::new();
    'epochs: for epoch in 0..a.hyper.epochs {
        for (_, idx) in round_robin(&[data.len()], a.hyper.batch, a.common.seed, epoch) {
            if losses.len() >= cap {
                break 'epochs;
            }
            let (x, labels) = encode_batch(&ring, &data, &idx)?;
            send_continue(engine.party, true)?;
            let t = Instant::now();
            let res = data_owner_step(&mut engine, &net, &x, &labels)?;
            let loss = res.loss.ok_or_else(|| Error::Desync("data owner saw no loss".into()))?;
            info!("step {} loss {loss:.6} ({:.2}s)", losses.len() + 1, t.elapsed().as_secs_f64());
            println!("{prefix}step={} loss={loss:.6}", losses.len() + 1);
            losses.push(loss);
        }
    }
    send_continue(engine.party, false)?;
    let online_seconds = online_start.elapsed().as_secs_f64();
    rep.set("steps", losses.len());
    rep.set("online_seconds", online_seconds);
    if let Some(&l) = losses.last() {
        rep.set("final_loss", l);
    }
    rep.set("loss_strictly_decreasing", losses.windows(2).all(|w| w[1] < w[0]));
    rep.set_quiet("losses", losses);
    rep.census("online", &engine.party.session.census().since(&offline));
    if a.transcript {
        rep.set("transcript_sha256", transcript_digest(engine.party));
    }
    rep.set("seconds", start.elapsed().as_secs_f64());
    rep.finish(manifest(a, "do", false, vec![]))?;
    Ok(true)
}

fn listen(a: &TrainArgs) -> Result<Vec<Session>> {
    let addr = a.listen.as_deref().unwrap_or("127.0.0.1:7700");
    let listener = TcpListener::bind(addr)?;
    println!("listening={}", listener.local_addr()?);
    (0..a.dos.max(1))
        .map(|_| tcp_accept(&listener, Role::ModelOwner))
        .collect()
}

pub fn run(a: &TrainArgs, prep_only: bool) -> Result<bool> {
    a.common.init_threads()?;
    if prep_only && a.bank_dir.is_none() {
        return Err(Error::Config("prep needs --bank-dir".into()));
    }
    if prep_only && a.mode != ModeArg::Prep {
        return Err(Error::Config("prep runs in --mode prep".into()));
    }
    match a.role {
        RoleArg::Mo => {
            let parties = listen(a)?
                .into_iter()
                .map(|s| connect(a, s, prep_only))
                .collect::<Result<Vec<_>>>()?;
            model_owner(a, parties, prep_only, "")
        }
        RoleArg::Do => {
            let addr = a
                .connect
                .as_deref()
                .ok_or_else(|| Error::Config("the data owner needs --connect host:port".into()))?;
            let party = connect(a, tcp_connect(addr, Role::DataOwner)?, prep_only)?;
            data_owner(a, party, prep_only, "")
        }
        RoleArg::Local => {
            if a.dos != 1 {
                return Err(Error::Config("--role local runs a single data owner".into()));
            }
            let (mo, dataowner) = memory_pair();
            std::thread::scope(|s| {
                let h = s.spawn(|| data_owner(a, connect(a, dataowner, prep_only)?, prep_only, "do."));
                let m = connect(a, mo, prep_only).and_then(|p| model_owner(a, vec![p], prep_only, "mo."));
                let d = h.join().map_err(|_| Error::Config("data owner thread panicked".into()))?;
                Ok(m? && d?)
            })
        }
    }
}
