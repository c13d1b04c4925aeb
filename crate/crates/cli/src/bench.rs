//! `bench-he`, `bench-layer`, `hardness` and `dp-bound`.

use std::time::Instant;

use duet_core::bfv::serialize::{ciphertext_from_bytes, ciphertext_size, ciphertext_to_bytes};
use duet_core::bfv::{self, BfvContext, PlainMultiplier, Plaintext};
use duet_core::linear::{grad_weight, linear_backward_input, linear_forward, ConvShape, DpConfig, LinearLayer, LinearShape};
use duet_core::party::{local_pair, run_both, run_digest, Party};
use duet_core::prep::{prep_backward_input, prep_forward, prep_grad_weight, BankPlan, LayerBanks, ScalarMode};
use duet_core::privacy::{dp_epsilon_in_range, dp_sigma_bound, hardness_estimate};
use duet_core::ring::{share, RingParams, RingTensor, ShareTensor};
use duet_core::transport::Census;
use duet_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::opts::{BenchHeArgs, BenchLayerArgs, DpBoundArgs, HardnessArgs};
use crate::report::{ciphertext_frames, table, Report};
use crate::simulate::hex;

fn time_ms<T>(iters: usize, mut f: impl FnMut() -> T) -> f64 {
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(f());
    }
    start.elapsed().as_secs_f64() * 1e3 / iters as f64
}

pub fn bench_he(a: &BenchHeArgs) -> Result<bool> {
    a.common.init_threads()?;
    let params = a.common.params.he();
    let ctx = BfvContext::new(params.clone())?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.common.seed);
    let n = ctx.degree();
    let iters = a.iters.max(1);
    let rand_poly = |rng: &mut ChaCha20Rng| -> Vec<u64> { (0..n).map(|_| rng.random::<u64>() & ctx.plain_mask()).collect() };

    let mut rows: Vec<(&str, f64)> = Vec::new();
    let mut residue: Vec<u64> = (0..n).map(|_| rng.random::<u64>() % params.moduli[0]).collect();
    rows.push(("ntt_forward", time_ms(iters, || ctx.tables[0].forward(&mut residue))));
    rows.push(("ntt_inverse", time_ms(iters, || ctx.tables[0].inverse(&mut residue))));
    let (sk, pk) = bfv::keygen(&ctx, &mut rng);
    rows.push(("keygen", time_ms(iters, || bfv::keygen(&ctx, &mut rng))));
    let pt = Plaintext::new(&ctx, rand_poly(&mut rng))?;
    let w = Plaintext::new(&ctx, rand_poly(&mut rng))?;
    let ct = bfv::encrypt(&ctx, &pk, &pt, &mut rng)?;
    rows.push(("encrypt", time_ms(iters, || bfv::encrypt(&ctx, &pk, &pt, &mut rng))));
    rows.push(("decrypt", time_ms(iters, || bfv::decrypt(&ctx, &sk, &ct))));
    rows.push(("add", time_ms(iters, || bfv::add(&ctx, &ct, &ct))));
    rows.push(("plain_encode", time_ms(iters, || PlainMultiplier::new(&ctx, &w))));
    let pm = PlainMultiplier::new(&ctx, &w);
    rows.push(("mul_plain", time_ms(iters, || bfv::mul_plain(&ctx, &ct, &pm))));
    let bytes = ciphertext_to_bytes(&ctx, &ct);
    rows.push(("serialize", time_ms(iters, || ciphertext_to_bytes(&ctx, &ct))));
    rows.push(("deserialize", time_ms(iters, || ciphertext_from_bytes(&ctx, &bytes))));

    let product = bfv::mul_plain(&ctx, &ct, &pm)?;
    let fresh_budget = bfv::noise_budget(&ctx, &sk, &ct)?;
    let product_budget = bfv::noise_budget(&ctx, &sk, &product)?;

    let mut rep = Report::new("bench-he", a.common.out.as_deref());
    rep.set("degree", n);
    rep.set("moduli", params.moduli.len());
    rep.set("log_q", (params.log_q() * 10.0).round() / 10.0);
    rep.set("plain_bits", params.plain_bits);
    rep.set("iters", iters);
    rep.set("threads", duet_core::bfv::threads());
    for (op, ms) in &rows {
        rep.set(&format!("{op}_ms"), round3(*ms));
    }
    rep.set("ciphertext_bytes", ciphertext_size(&ctx));
    rep.set("noise_budget_fresh", fresh_budget);
    rep.set("noise_budget_after_mul", product_budget);
    let body: Vec<Vec<String>> = rows.iter().map(|(op, ms)| vec![op.to_string(), format!("{ms:.3}")]).collect();
    eprintln!("{}", table(&["operation", "ms/op"], &body));
    rep.finish(json!({
        "command": "bench-he",
        "config": { "common": a.common.json(), "iters": iters },
        "seeds": { "rng": a.common.seed },
        "digests": { "bfv": hex(&params.digest()) },
        "outputs": [],
    }))?;
    Ok(true)
}

fn round3(x: f64) -> f64 {
    (x * 1e3).round() / 1e3
}

/// `fc:IN:OUT` or `conv:CIN:COUT:KERNEL:STRIDE:PAD:SIZE`.
pub fn parse_layer(s: &str) -> Result<LinearShape> {
    let bad = || Error::Config(format!("bad layer {s:?}; expected fc:IN:OUT or conv:CIN:COUT:K:STRIDE:PAD:SIZE"));
    let mut parts = s.split(':');
    let kind = parts.next().ok_or_else(bad)?;
    let nums: Vec<usize> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let shape = match (kind, nums.as_slice()) {
        ("fc", &[inputs, outputs]) => LinearShape::Dense { inputs, outputs },
        ("conv", &[c_in, c_out, kernel, stride, padding, size]) => LinearShape::Conv(ConvShape {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            size,
        }),
        _ => return Err(bad()),
    };
    shape.check()?;
    Ok(shape)
}

fn random_tensor(ring: &RingParams, shape: &[usize], scale: u32, amp: f64, rng: &mut ChaCha20Rng) -> Result<RingTensor> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-amp..amp)).collect();
    RingTensor::encode(ring, shape, &vals, scale)
}

struct Measured {
    seconds: f64,
    census: Census,
}

/// Run `f` on both parties and measure the model owner's wall time and traffic.
fn measure(mo: &mut Party, dataowner: &mut Party, f: impl Fn(&mut Party) -> Result<()> + Sync) -> Result<Measured> {
    let before = mo.session.census().clone();
    let start = Instant::now();
    let (a, b) = run_both(mo, dataowner, &f);
    a?;
    b?;
    Ok(Measured {
        seconds: start.elapsed().as_secs_f64(),
        census: mo.session.census().since(&before),
    })
}

pub fn bench_layer(a: &BenchLayerArgs) -> Result<bool> {
    a.common.init_threads()?;
    let ring = a.common.params.ring();
    let shape = parse_layer(&a.layer)?;
    let batch = a.batch;
    let f = ring.frac_bits;
    let mut rng = ChaCha20Rng::seed_from_u64(a.common.seed);
    let bound = (1.0 / shape.fan_in() as f64).sqrt();
    let layer = LinearLayer {
        id: 1,
        shape,
        weight: Some(random_tensor(&ring, &shape.weight_shape(), f, bound, &mut rng)?),
        bias: Some(random_tensor(&ring, &[shape.outputs()], 2 * f, bound, &mut rng)?),
    };
    let peer = layer.peer_view();
    let x = random_tensor(&ring, &shape.input_shape(batch), f, 1.0, &mut rng)?;
    let gy = random_tensor(&ring, &shape.output_shape(batch), f, 0.01, &mut rng)?;
    let (x0, x1) = share(&x, &mut rng);
    let (g0, g1) = share(&gy, &mut rng);
    let pick = |p: &Party| -> (&LinearLayer, &ShareTensor, &ShareTensor) {
        if p.is_mo() {
            (&layer, &x0, &g0)
        } else {
            (&peer, &x1, &g1)
        }
    };
    let dp = DpConfig::disabled();

    let (mut mo, mut dataowner) = local_pair(ring, a.ot, a.common.seed);
    let setup_start = Instant::now();
    let (r0, r1) = run_both(&mut mo, &mut dataowner, |p| p.setup_he(a.common.params.he()));
    r0?;
    r1?;
    let setup_seconds = setup_start.elapsed().as_secs_f64();

    let mut rows: Vec<(String, Measured)> = Vec::new();
    rows.push((
        "fullhe forward".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, x, _) = pick(p);
            linear_forward(p, l, x).map(drop)
        })?,
    ));
    rows.push((
        "fullhe backward".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, _, g) = pick(p);
            linear_backward_input(p, l, g).map(drop)
        })?,
    ));
    rows.push((
        "fullhe weight-grad".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, x, g) = pick(p);
            grad_weight(p, l, x, g, &dp).map(drop)
        })?,
    ));

    let plan = BankPlan {
        masks: a.masks_m,
        scalars: ScalarMode::Vandermonde,
        reuse_cap: None,
        need_input_grad: true,
    };
    let prep_start = Instant::now();
    let before = mo.session.census().clone();
    let (b0, b1) = run_both(&mut mo, &mut dataowner, |p| LayerBanks::prepare(p, 1, shape, batch, &plan));
    let prep = Measured {
        seconds: prep_start.elapsed().as_secs_f64(),
        census: mo.session.census().since(&before),
    };
    rows.push(("prep offline".into(), prep));
    let banks = [std::sync::Mutex::new(b0?), std::sync::Mutex::new(b1?)];
    let bank = |p: &Party| &banks[p.role.index()];
    rows.push((
        "prep forward".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, x, _) = pick(p);
            prep_forward(p, l, &mut bank(p).lock().unwrap(), x).map(drop)
        })?,
    ));
    rows.push((
        "prep backward".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, _, g) = pick(p);
            prep_backward_input(p, l, &mut bank(p).lock().unwrap(), g).map(drop)
        })?,
    ));
    rows.push((
        "prep weight-grad".into(),
        measure(&mut mo, &mut dataowner, |p| {
            let (l, x, g) = pick(p);
            prep_grad_weight(p, l, &mut bank(p).lock().unwrap(), x, g, &dp).map(drop)
        })?,
    ));

    let mut rep = Report::new("bench-layer", a.common.out.as_deref());
    rep.set("layer", a.layer.clone());
    rep.set("batch", batch);
    rep.set("masks_m", a.masks_m);
    rep.set("degree", a.common.params.he().degree);
    rep.set("setup_seconds", round3(setup_seconds));
    let total = |prefix: &str| -> (f64, u64) {
        rows.iter()
            .filter(|(n, _)| n.starts_with(prefix) && n != "prep offline")
            .fold((0.0, 0), |(s, b), (_, m)| (s + m.seconds, b + m.census.total_bytes()))
    };
    let mut body = Vec::new();
    for (name, m) in &rows {
        let key = name.replace([' ', '-'], "_");
        rep.set(&format!("{key}_seconds"), round3(m.seconds));
        rep.set(&format!("{key}_bytes"), m.census.total_bytes());
        rep.set(&format!("{key}_ciphertext_frames"), ciphertext_frames(&m.census));
        body.push(vec![
            name.clone(),
            format!("{:.3}", m.seconds),
            m.census.total_bytes().to_string(),
            ciphertext_frames(&m.census).to_string(),
            m.census.rounds.to_string(),
        ]);
    }
    let (he_s, he_b) = total("fullhe");
    let (on_s, on_b) = total("prep ");
    rep.set("fullhe_total_seconds", round3(he_s));
    rep.set("fullhe_total_bytes", he_b);
    rep.set("prep_online_seconds", round3(on_s));
    rep.set("prep_online_bytes", on_b);
    rep.set("online_byte_ratio", on_b as f64 / he_b as f64);
    eprintln!("{}", table(&["operation", "seconds", "bytes", "ct frames", "rounds"], &body));
    rep.finish(json!({
        "command": "bench-layer",
        "config": { "common": a.common.json(), "layer": a.layer, "batch": batch, "masks_m": a.masks_m,
                    "ot": format!("{:?}", a.ot).to_lowercase() },
        "seeds": { "data": a.common.seed, "session": a.common.seed },
        "digests": { "run": hex(&run_digest(&ring, &a.common.params.he())) },
        "outputs": [],
    }))?;
    Ok(true)
}

const TABLE_ROWS: [(u32, u32); 4] = [(2, 10), (2, 25), (4, 25), (8, 25)];

pub fn hardness(a: &HardnessArgs) -> Result<bool> {
    let rows = match (a.m, a.f) {
        (Some(m), Some(f)) => vec![(m, f)],
        (None, None) => TABLE_ROWS.to_vec(),
        _ => return Err(Error::Config("give both --m and --f, or neither for the table".into())),
    };
    let mut rep = Report::new("hardness", a.out.as_deref());
    let mut body = Vec::new();
    let mut list = Vec::new();
    for (m, f) in rows {
        let r = hardness_estimate(m, f)?;
        if body.is_empty() && a.m.is_some() {
            rep.set("bits", r.bits);
            rep.set("rsa_band", r.rsa_band);
            rep.set("time", r.time_display());
            rep.set("seconds", r.seconds);
        }
        println!("{r}");
        list.push(json!({ "m": m, "f": f, "bits": r.bits, "rsa_band": r.rsa_band, "time": r.time_display() }));
        body.push(vec![m.to_string(), f.to_string(), r.bits.to_string(), r.rsa_band.to_string(), r.time_display()]);
    }
    eprintln!("{}", table(&["m", "f", "bits", "RSA", "brute force"], &body));
    rep.set_quiet("rows", list);
    rep.finish(json!({ "command": "hardness", "config": { "m": a.m, "f": a.f }, "seeds": {}, "digests": {}, "outputs": [] }))?;
    Ok(true)
}

pub fn dp_bound(a: &DpBoundArgs) -> Result<bool> {
    let sigma = dp_sigma_bound(a.batch, a.steps, a.records, a.epsilon, a.delta, a.c2)?;
    let mut rep = Report::new("dp-bound", a.out.as_deref());
    rep.set("sigma", sigma);
    rep.set("epsilon_in_range", dp_epsilon_in_range(a.batch, a.steps, a.records, a.epsilon, 1.0));
    rep.finish(json!({
        "command": "dp-bound",
        "config": { "batch": a.batch, "steps": a.steps, "records": a.records, "epsilon": a.epsilon,
                    "delta": a.delta, "c2": a.c2 },
        "seeds": {}, "digests": {}, "outputs": [],
    }))?;
    Ok(true)
}
