//! Linear-layer training with preprocessed mask banks: homomorphic work
//! happens once per operator before training, and every training step
//! exchanges only masked ring elements.

mod bank;

pub use bank::{banks_consistent, online_shared_product, prep_operator, MaskBank, Operator, OperatorId, ScalarMode};

use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::linear::{add_raw, direct, encoded_noise, DpConfig, LinearLayer, LinearShape};
use crate::party::Party;
use crate::ring::{RingTensor, ShareTensor};
use crate::transport::codec::{bytes_to_u64s, u64s_to_bytes};
use crate::transport::msg;

pub const DEFAULT_MASKS: usize = 8;

/// Banks for every operator of one layer. The first layer of a network
/// never needs its input gradient, so that bank is optional.
#[derive(Clone, Debug)]
pub struct LayerBanks {
    pub forward: MaskBank,
    pub backward_input: Option<MaskBank>,
    pub grad_weight: MaskBank,
    pub grad_weight_rev: MaskBank,
}

/// Settings for producing the banks of one layer.
#[derive(Clone, Copy, Debug)]
pub struct BankPlan {
    pub masks: usize,
    pub scalars: ScalarMode,
    pub reuse_cap: Option<u64>,
    pub need_input_grad: bool,
}

impl LayerBanks {
    pub fn prepare(p: &mut Party, layer_id: u16, shape: LinearShape, batch: usize, plan: &BankPlan) -> Result<LayerBanks> {
        let mut make = |id: OperatorId| -> Result<MaskBank> {
            let mut bank = prep_operator(p, Operator::new(id, shape, batch)?, plan.masks, layer_id, plan.scalars)?;
            bank.reuse_cap = plan.reuse_cap;
            Ok(bank)
        };
        let forward = make(OperatorId::Forward)?;
        let backward_input = if plan.need_input_grad {
            Some(make(OperatorId::BackwardInput)?)
        } else {
            None
        };
        Ok(LayerBanks {
            forward,
            backward_input,
            grad_weight: make(OperatorId::GradWeight)?,
            grad_weight_rev: make(OperatorId::GradWeightRev)?,
        })
    }

    fn file(dir: &Path, layer_id: u16, id: OperatorId, role: crate::ring::Role) -> PathBuf {
        dir.join(format!("layer{layer_id}-op{}-{}.bank", id.tag(), role.as_str()))
    }

    pub fn save(&self, dir: &Path, layer_id: u16) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for bank in [Some(&self.forward), self.backward_input.as_ref(), Some(&self.grad_weight), Some(&self.grad_weight_rev)]
            .into_iter()
            .flatten()
        {
            bank.save(&LayerBanks::file(dir, layer_id, bank.op.id, bank.role))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, role: crate::ring::Role, layer_id: u16, shape: LinearShape, batch: usize, need_input_grad: bool) -> Result<LayerBanks> {
        let load = |id: OperatorId| -> Result<MaskBank> {
            MaskBank::load(&LayerBanks::file(dir, layer_id, id, role), role, &Operator::new(id, shape, batch)?)
        };
        Ok(LayerBanks {
            forward: load(OperatorId::Forward)?,
            backward_input: if need_input_grad {
                Some(load(OperatorId::BackwardInput)?)
            } else {
                None
            },
            grad_weight: load(OperatorId::GradWeight)?,
            grad_weight_rev: load(OperatorId::GradWeightRev)?,
        })
    }
}

fn check_batch(layer: &LinearLayer, bank: &MaskBank, batch: usize) -> Result<()> {
    ensure!(
        bank.op.map.shape == layer.shape && bank.op.map.batch == batch,
        Error::Shape(format!(
            "bank for {:?} at batch {} used with {:?} at batch {batch}",
            bank.op.map.shape, bank.op.map.batch, layer.shape
        ))
    );
    Ok(())
}

/// `F(W, v)` on shares of `v`: one online product for the data owner's
/// share plus the model owner's local term.
fn weight_product(p: &mut Party, layer: &LinearLayer, bank: &mut MaskBank, v: &ShareTensor) -> Result<Vec<u64>> {
    check_batch(layer, bank, v.shape()[0])?;
    let mask = p.mask();
    if p.is_mo() {
        let w = layer
            .weight
            .as_ref()
            .ok_or_else(|| Error::Config(format!("layer {} has no weights here", layer.id)))?;
        let mut out = online_shared_product(p, bank, &w.data, layer.id)?;
        add_raw(&mut out, &bank.op.eval(&w.data, &v.value.data, mask)?, mask);
        Ok(out)
    } else {
        online_shared_product(p, bank, &v.value.data, layer.id)
    }
}

pub fn prep_forward(p: &mut Party, layer: &LinearLayer, banks: &mut LayerBanks, x: &ShareTensor) -> Result<ShareTensor> {
    let batch = x.shape()[0];
    ensure!(
        x.shape() == layer.shape.input_shape(batch).as_slice(),
        Error::Shape(format!("input {:?} for layer {:?}", x.shape(), layer.shape))
    );
    let mut out = weight_product(p, layer, &mut banks.forward, x)?;
    if p.is_mo() {
        let b = layer
            .bias
            .as_ref()
            .ok_or_else(|| Error::Config(format!("layer {} has no bias here", layer.id)))?;
        direct::add_bias(&mut out, &b.data, batch, p.mask());
    }
    let value = RingTensor::from_raw(&layer.shape.output_shape(batch), out, x.scale() + p.ring.frac_bits, p.ring.ell)?;
    Ok(ShareTensor::new(p.role, value))
}

pub fn prep_backward_input(p: &mut Party, layer: &LinearLayer, banks: &mut LayerBanks, gy: &ShareTensor) -> Result<ShareTensor> {
    let batch = gy.shape()[0];
    ensure!(
        gy.shape() == layer.shape.output_shape(batch).as_slice(),
        Error::Shape(format!("gradient {:?} for layer {:?}", gy.shape(), layer.shape))
    );
    let bank = banks
        .backward_input
        .as_mut()
        .ok_or_else(|| Error::Config(format!("layer {} has no input-gradient bank", layer.id)))?;
    let out = weight_product(p, layer, bank, gy)?;
    let value = RingTensor::from_raw(&layer.shape.input_shape(batch), out, gy.scale() + p.ring.frac_bits, p.ring.ell)?;
    Ok(ShareTensor::new(p.role, value))
}

/// Weight gradient from two online products (one per cross term), revealed
/// to the model owner exactly as in the homomorphic variant.
pub fn prep_grad_weight(
    p: &mut Party,
    layer: &LinearLayer,
    banks: &mut LayerBanks,
    x: &ShareTensor,
    gy: &ShareTensor,
    dp: &DpConfig,
) -> Result<Option<RingTensor>> {
    let batch = x.shape()[0];
    check_batch(layer, &banks.grad_weight, batch)?;
    check_batch(layer, &banks.grad_weight_rev, batch)?;
    ensure!(
        x.shape() == layer.shape.input_shape(batch).as_slice() && gy.shape() == layer.shape.output_shape(batch).as_slice(),
        Error::Shape("weight-gradient operands do not fit the layer".into())
    );
    let mask = p.mask();
    let scale = x.scale() + gy.scale();
    let (first, second) = if p.is_mo() {
        (&gy.value.data, &x.value.data)
    } else {
        (&x.value.data, &gy.value.data)
    };
    let mut share = online_shared_product(p, &mut banks.grad_weight, first, layer.id)?;
    let rev = online_shared_product(p, &mut banks.grad_weight_rev, second, layer.id)?;
    add_raw(&mut share, &rev, mask);
    add_raw(&mut share, &banks.grad_weight.op.map.eval(&gy.value.data, &x.value.data, mask)?, mask);
    p.session.set_tag(layer.id);
    if p.is_mo() {
        let theirs = bytes_to_u64s(&p.session.recv(msg::GRADW_REVEAL)?)?;
        ensure!(theirs.len() == share.len(), Error::Shape("weight reveal length".into()));
        add_raw(&mut share, &theirs, mask);
        let full = RingTensor::from_raw(&layer.shape.weight_shape(), share, scale, p.ring.ell)?;
        Ok(Some(full.arith_shift(p.ring.frac_bits)))
    } else {
        let ring = p.ring;
        let e = encoded_noise(&ring, share.len(), dp, scale, &mut p.rng)?;
        add_raw(&mut share, &e, mask);
        p.session.send(msg::GRADW_REVEAL, u64s_to_bytes(&share))?;
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::bfv::BfvParams;
    use crate::linear::{self, ConvShape};
    use crate::ot::OtBackend;
    use crate::party::{local_pair, run_both};
    use crate::ring::{reconstruct, share, RingParams, Role};

    fn he_pair(seed: u64) -> (Party, Party) {
        let (mut a, mut b) = local_pair(RingParams::small(), OtBackend::Dealer, seed);
        run_both(&mut a, &mut b, |p| p.setup_he(BfvParams::small()).unwrap());
        (a, b)
    }

    fn banks(mo: &mut Party, dataowner: &mut Party, op: Operator, m: usize, scalars: ScalarMode) -> (MaskBank, MaskBank) {
        run_both(mo, dataowner, |p| prep_operator(p, op, m, 0, scalars).unwrap())
    }

    fn product(mo: &mut Party, dataowner: &mut Party, banks: &mut (MaskBank, MaskBank), u: &[u64], v: &[u64]) -> Vec<u64> {
        let (b0, b1) = (&mut banks.0, &mut banks.1);
        let (s0, s1) = std::thread::scope(|s| {
            let h = s.spawn(|| online_shared_product(dataowner, b1, v, 0).unwrap());
            let a = online_shared_product(mo, b0, u, 0).unwrap();
            (a, h.join().unwrap())
        });
        let mask = mo.mask();
        s0.iter().zip(&s1).map(|(a, b)| a.wrapping_add(*b) & mask).collect()
    }

    fn random(len: usize, rng: &mut ChaCha20Rng) -> Vec<u64> {
        (0..len).map(|_| rng.random::<u64>() & crate::ring::mask(41)).collect()
    }

    #[test]
    fn scalar_product_bank() {
        let (mut mo, mut dataowner) = he_pair(1);
        let op = Operator::new(OperatorId::Forward, LinearShape::Dense { inputs: 1, outputs: 1 }, 1).unwrap();
        let mut b = banks(&mut mo, &mut dataowner, op, 1, ScalarMode::Uniform);
        assert!(banks_consistent(&b.0, &b.1).unwrap());
        let mut b2 = banks(&mut mo, &mut dataowner, op, 2, ScalarMode::Uniform);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mask = crate::ring::mask(41);
        for _ in 0..5 {
            let (u, v) = (random(1, &mut rng), random(1, &mut rng));
            assert_eq!(product(&mut mo, &mut dataowner, &mut b, &u, &v), vec![u[0].wrapping_mul(v[0]) & mask]);
            assert_eq!(product(&mut mo, &mut dataowner, &mut b2, &u, &v), vec![u[0].wrapping_mul(v[0]) & mask]);
        }
        assert_eq!(product(&mut mo, &mut dataowner, &mut b2, &[0], &[12345]), vec![0]);
        assert_eq!((b2.0.used, b2.1.used), (6, 6));
    }

    #[test]
    fn dense_online_product_is_he_free_and_bilinear() {
        let (mut mo, mut dataowner) = he_pair(2);
        let shape = LinearShape::Dense { inputs: 24, outputs: 10 };
        let op = Operator::new(OperatorId::Forward, shape, 8).unwrap();
        let mut b = banks(&mut mo, &mut dataowner, op, 8, ScalarMode::Vandermonde);
        let before = mo.session.census().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mask = crate::ring::mask(41);
        let u1 = random(op.u_len(), &mut rng);
        let u2 = random(op.u_len(), &mut rng);
        let v1 = random(op.v_len(), &mut rng);
        let v2 = random(op.v_len(), &mut rng);
        let y = product(&mut mo, &mut dataowner, &mut b, &u1, &v1);
        assert_eq!(y, op.eval(&u1, &v1, mask).unwrap());
        let usum: Vec<u64> = u1.iter().zip(&u2).map(|(a, b)| a.wrapping_add(*b) & mask).collect();
        let vsum: Vec<u64> = v1.iter().zip(&v2).map(|(a, b)| a.wrapping_add(*b) & mask).collect();
        let mut expect = vec![0u64; op.result_len()];
        for (u, v) in [(&u1, &v1), (&u1, &v2), (&u2, &v1), (&u2, &v2)] {
            add_raw(&mut expect, &product(&mut mo, &mut dataowner, &mut b, u, v), mask);
        }
        assert_eq!(product(&mut mo, &mut dataowner, &mut b, &usum, &vsum), expect);
        let online = mo.session.census().since(&before);
        for kind in [msg::PREP_INPUT_CT, msg::PREP_MASKED_CT, msg::FWD_INPUT_CT, msg::FWD_MASKED_CT] {
            assert_eq!(online.frames_sent_of(kind) + online.frames_received_of(kind), 0);
        }
    }

    #[test]
    fn bank_file_roundtrip() {
        let (mut mo, mut dataowner) = he_pair(5);
        let shape = LinearShape::Dense { inputs: 3, outputs: 2 };
        let op = Operator::new(OperatorId::GradWeightRev, shape, 2).unwrap();
        let mut b = banks(&mut mo, &mut dataowner, op, 3, ScalarMode::Uniform);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (u, v) = (random(op.u_len(), &mut rng), random(op.v_len(), &mut rng));
        product(&mut mo, &mut dataowner, &mut b, &u, &v);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mo.bank");
        b.0.save(&path).unwrap();
        let loaded = MaskBank::load(&path, Role::ModelOwner, &op).unwrap();
        assert_eq!(loaded, b.0);
        assert_eq!(loaded.used, 1);
        let other = Operator::new(OperatorId::GradWeightRev, LinearShape::Dense { inputs: 3, outputs: 3 }, 2).unwrap();
        assert!(MaskBank::load(&path, Role::ModelOwner, &other).is_err());
        assert!(MaskBank::load(&path, Role::DataOwner, &op).is_err());

        let (mut mo2, mut do2) = he_pair(6);
        let b2 = banks(&mut mo2, &mut do2, op, 3, ScalarMode::Uniform);
        let path2 = dir.path().join("mo2.bank");
        b2.0.save(&path2).unwrap();
        assert_ne!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn zero_sized_operator_rejected() {
        assert!(Operator::new(OperatorId::Forward, LinearShape::Dense { inputs: 0, outputs: 2 }, 1).is_err());
    }

    fn equivalence(shape: LinearShape, batch: usize, need_input_grad: bool) {
        let (mut mo, mut dataowner) = he_pair(7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let layer = LinearLayer {
            id: 2,
            shape,
            weight: Some(RingTensor::random(&shape.weight_shape(), 12, 41, &mut rng)),
            bias: Some(RingTensor::random(&[shape.outputs()], 24, 41, &mut rng)),
        };
        let peer = layer.peer_view();
        let (x0, x1) = share(&RingTensor::random(&shape.input_shape(batch), 12, 41, &mut rng), &mut rng);
        let (g0, g1) = share(&RingTensor::random(&shape.output_shape(batch), 12, 41, &mut rng), &mut rng);
        let plan = BankPlan {
            masks: 3,
            scalars: ScalarMode::Uniform,
            reuse_cap: None,
            need_input_grad,
        };
        let dp = DpConfig::disabled();
        let (a, b) = run_both(&mut mo, &mut dataowner, |p| {
            let (l, x, g) = if p.is_mo() { (&layer, &x0, &g0) } else { (&peer, &x1, &g1) };
            let he = (
                linear::linear_forward(p, l, x).unwrap(),
                linear::linear_backward_input(p, l, g).unwrap(),
                linear::grad_weight(p, l, x, g, &dp).unwrap(),
            );
            let mut banks = LayerBanks::prepare(p, l.id, shape, batch, &plan).unwrap();
            let online = (
                prep_forward(p, l, &mut banks, x).unwrap(),
                prep_backward_input(p, l, &mut banks, g).unwrap(),
                prep_grad_weight(p, l, &mut banks, x, g, &dp).unwrap(),
            );
            (he, online)
        });
        assert_eq!(reconstruct(&a.0 .0, &b.0 .0).unwrap(), reconstruct(&a.1 .0, &b.1 .0).unwrap());
        assert_eq!(reconstruct(&a.0 .1, &b.0 .1).unwrap(), reconstruct(&a.1 .1, &b.1 .1).unwrap());
        assert_eq!(a.0 .2, a.1 .2);
        assert!(a.0 .2.is_some());
    }

    #[test]
    fn dense_layer_matches_homomorphic_protocol() {
        equivalence(LinearShape::Dense { inputs: 20, outputs: 7 }, 5, true);
    }

    #[test]
    fn conv_layer_matches_homomorphic_protocol() {
        equivalence(
            LinearShape::Conv(ConvShape {
                c_in: 2,
                c_out: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                size: 8,
            }),
            2,
            true,
        );
    }

    #[test]
    fn saved_layer_banks_reload() {
        let (mut mo, mut dataowner) = he_pair(9);
        let shape = LinearShape::Dense { inputs: 4, outputs: 3 };
        let plan = BankPlan {
            masks: 2,
            scalars: ScalarMode::Uniform,
            reuse_cap: Some(1),
            need_input_grad: false,
        };
        let dir = tempfile::tempdir().unwrap();
        run_both(&mut mo, &mut dataowner, |p| {
            let banks = LayerBanks::prepare(p, 5, shape, 2, &plan).unwrap();
            banks.save(dir.path(), 5).unwrap();
            let back = LayerBanks::load(dir.path(), p.role, 5, shape, 2, false).unwrap();
            assert_eq!(back.forward, banks.forward);
            assert!(back.backward_input.is_none());
        });
    }
}
