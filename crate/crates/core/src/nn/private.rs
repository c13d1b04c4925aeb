//! The two-party engine: each party runs the same step with its own share.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::linear::{grad_weight, linear_backward_input, linear_forward, reveal_grad_bias, DpConfig, LinearLayer};
use crate::nonlinear::{avgpool2_backward, avgpool2_forward, relu_backward, relu_forward, truncate, BoolShareTensor, TruncMode};
use crate::party::Party;
use crate::prep::{prep_backward_input, prep_forward, prep_grad_weight, BankPlan, LayerBanks};
use crate::ring::{RingParams, RingTensor, Role, ShareTensor};
use crate::transport::codec::{bytes_to_u64s, u64s_to_bytes};
use crate::transport::msg;

use super::engine::Engine;
use super::model::{layer_tag, Network};

/// How linear layers are evaluated.
pub enum LinearMode {
    /// Homomorphic evaluation every step.
    FullHe,
    /// Preprocessed mask banks, indexed by layer.
    Prep(Vec<Option<LayerBanks>>),
}

impl LinearMode {
    pub fn name(&self) -> &'static str {
        match self {
            LinearMode::FullHe => "fullhe",
            LinearMode::Prep(_) => "prep",
        }
    }
}

pub struct Private<'a> {
    pub party: &'a mut Party,
    pub mode: LinearMode,
    pub trunc: TruncMode,
    pub dp: DpConfig,
}

impl<'a> Private<'a> {
    pub fn new(party: &'a mut Party, mode: LinearMode, trunc: TruncMode, dp: DpConfig) -> Self {
        Private { party, mode, trunc, dp }
    }
}

fn bank_for<'m>(mode: &'m mut LinearMode, layer: &LinearLayer) -> Result<Option<&'m mut LayerBanks>> {
    match mode {
        LinearMode::FullHe => Ok(None),
        LinearMode::Prep(all) => all
            .get_mut(layer.id as usize - 1)
            .and_then(Option::as_mut)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("no mask bank for layer {}", layer.id))),
    }
}

/// Produce the banks of every linear layer of `net` at batch size `batch`.
pub fn prepare_banks(p: &mut Party, net: &Network, batch: usize, plan: &BankPlan) -> Result<Vec<Option<LayerBanks>>> {
    let first = net.first_linear();
    net.linear
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.as_ref()
                .map(|l| {
                    let plan = BankPlan {
                        need_input_grad: i > first,
                        ..*plan
                    };
                    LayerBanks::prepare(p, l.id, l.shape, batch, &plan)
                })
                .transpose()
        })
        .collect()
}

pub fn save_banks(banks: &[Option<LayerBanks>], dir: &Path) -> Result<()> {
    for (i, b) in banks.iter().enumerate() {
        if let Some(b) = b {
            b.save(dir, layer_tag(i))?;
        }
    }
    Ok(())
}

pub fn load_banks(dir: &Path, role: Role, net: &Network, batch: usize) -> Result<Vec<Option<LayerBanks>>> {
    let first = net.first_linear();
    net.linear
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.as_ref()
                .map(|l| LayerBanks::load(dir, role, l.id, l.shape, batch, i > first))
                .transpose()
        })
        .collect()
}

impl Engine for Private<'_> {
    type T = ShareTensor;
    type Bits = BoolShareTensor;

    fn ring(&self) -> RingParams {
        self.party.ring
    }

    fn enter(&mut self, index: usize) {
        self.party.session.set_tag(layer_tag(index));
    }

    /// The model owner's share of the input is zero; the data owner's is the input.
    fn input(&mut self, x: Option<&RingTensor>, shape: &[usize]) -> Result<ShareTensor> {
        let ring = self.party.ring;
        let value = match (self.party.role, x) {
            (Role::DataOwner, Some(x)) => x.clone(),
            (Role::DataOwner, None) => return Err(Error::Config("data owner has no batch".into())),
            (Role::ModelOwner, _) => RingTensor::zeros(shape, ring.frac_bits, ring.ell),
        };
        Ok(ShareTensor::new(self.party.role, value))
    }

    fn linear_forward(&mut self, layer: &LinearLayer, x: &ShareTensor) -> Result<ShareTensor> {
        match bank_for(&mut self.mode, layer)? {
            None => linear_forward(self.party, layer, x),
            Some(b) => prep_forward(self.party, layer, b, x),
        }
    }

    fn linear_backward(&mut self, layer: &LinearLayer, gy: &ShareTensor) -> Result<ShareTensor> {
        match bank_for(&mut self.mode, layer)? {
            None => linear_backward_input(self.party, layer, gy),
            Some(b) => prep_backward_input(self.party, layer, b, gy),
        }
    }

    fn grad_weight(&mut self, layer: &LinearLayer, x: &ShareTensor, gy: &ShareTensor) -> Result<Option<RingTensor>> {
        let dp = self.dp;
        match bank_for(&mut self.mode, layer)? {
            None => grad_weight(self.party, layer, x, gy, &dp),
            Some(b) => prep_grad_weight(self.party, layer, b, x, gy, &dp),
        }
    }

    fn grad_bias(&mut self, layer: &LinearLayer, gy: &ShareTensor) -> Result<Option<RingTensor>> {
        reveal_grad_bias(self.party, layer, gy, &self.dp)
    }

    fn relu(&mut self, x: &ShareTensor) -> Result<(ShareTensor, BoolShareTensor)> {
        relu_forward(self.party, x)
    }

    fn relu_backward(&mut self, bits: &BoolShareTensor, g: &ShareTensor) -> Result<ShareTensor> {
        relu_backward(self.party, bits, g)
    }

    fn truncate(&mut self, x: &ShareTensor, shift: u32) -> Result<ShareTensor> {
        truncate(self.party, x, shift, self.trunc, true)
    }

    fn avgpool(&mut self, x: &ShareTensor) -> Result<ShareTensor> {
        avgpool2_forward(self.party, x, self.trunc)
    }

    fn avgpool_backward(&mut self, g: &ShareTensor, input_shape: &[usize]) -> Result<ShareTensor> {
        avgpool2_backward(self.party, g, input_shape, self.trunc)
    }

    fn reveal_output(&mut self, y: &ShareTensor) -> Result<Option<RingTensor>> {
        if self.party.is_mo() {
            self.party.session.send(msg::OUTPUT_REVEAL, u64s_to_bytes(&y.value.data))?;
            Ok(None)
        } else {
            let theirs = bytes_to_u64s(&self.party.session.recv(msg::OUTPUT_REVEAL)?)?;
            ensure!(theirs.len() == y.value.len(), Error::Shape("output reveal length".into()));
            let other = RingTensor::from_raw(&y.value.shape, theirs, y.value.scale, y.value.ell)?;
            Ok(Some(y.value.add(&other)?))
        }
    }

    fn output_gradient(&mut self, g: Option<RingTensor>, shape: &[usize], scale: u32) -> Result<ShareTensor> {
        let ring = self.party.ring;
        let value = match self.party.role {
            Role::ModelOwner => RingTensor::zeros(shape, scale, ring.ell),
            Role::DataOwner => g.ok_or_else(|| Error::Config("data owner has no output gradient".into()))?,
        };
        Ok(ShareTensor::new(self.party.role, value))
    }
}
