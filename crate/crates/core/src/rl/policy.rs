use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PpoConfig;
use crate::autodiff::layers::{Activation, ConvLayer, Init, Mlp};
use crate::autodiff::{softmax, AutodiffError, ParamStore, Tape, Var};
use crate::envs::{Image, StepResult, NUM_ACTIONS};
use crate::metrics::{Agent, AgentError};
use crate::srl::{Method, SrlModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyInput {
    /// A state vector of this length.
    Vector(usize),
    /// A flattened `size x size x 3` image scaled to `[0, 1]`.
    Pixels(usize),
}

impl PolicyInput {
    pub fn for_model(model: &SrlModel) -> Self {
        match model.method() {
            Method::RawPixels => PolicyInput::Pixels(model.env().image_size),
            _ => PolicyInput::Vector(model.state_dim()),
        }
    }

    pub fn len(self) -> usize {
        match self {
            PolicyInput::Vector(d) => d,
            PolicyInput::Pixels(s) => s * s * 3,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Separate tanh MLPs for action logits and state value, behind an optional
/// relu convolution for pixel inputs.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub input: PolicyInput,
    pub trunk: Option<ConvLayer>,
    pub actor: Mlp,
    pub critic: Mlp,
}

impl ActorCritic {
    pub fn new(
        store: &mut ParamStore,
        input: PolicyInput,
        cfg: &PpoConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (trunk, width) = match input {
            PolicyInput::Vector(d) => (None, d),
            PolicyInput::Pixels(s) => {
                let conv =
                    ConvLayer::new(store, "policy.trunk", (s, s, 3), cfg.pixel_trunk, true, rng);
                let (h, w, c) = conv.out_shape();
                (Some(conv), h * w * c)
            }
        };
        let sizes = |out: usize| {
            let mut v = vec![width];
            v.extend(&cfg.hidden);
            v.push(out);
            v
        };
        let actor = Mlp::new(
            store,
            "policy.actor",
            &sizes(NUM_ACTIONS),
            Activation::Tanh,
            Init::Normal(0.01),
            true,
            rng,
        );
        let critic = Mlp::new(
            store,
            "policy.critic",
            &sizes(1),
            Activation::Tanh,
            Init::Glorot,
            true,
            rng,
        );
        Self {
            input,
            trunk,
            actor,
            critic,
        }
    }

    fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        match (&self.trunk, self.input) {
            (Some(conv), PolicyInput::Pixels(s)) => {
                let rows = tape.value(x).shape()[0];
                let img = tape.reshape(x, vec![rows, s, s, 3])?;
                let h = conv.forward(tape, store, img)?;
                tape.flatten(h)
            }
            _ => Ok(x),
        }
    }

    /// Taped `(logits [m, 4], values [m, 1])`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let h = self.features(tape, store, x)?;
        let logits = self.actor.forward(tape, store, h)?;
        let values = self.critic.forward(tape, store, h)?;
        Ok((logits, values))
    }

    /// Tape-free `(logits, values)` for `rows` inputs.
    pub fn infer(&self, store: &ParamStore, rows: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = match &self.trunk {
            Some(conv) => conv.infer(store, rows, x),
            None => x.to_vec(),
        };
        (
            self.actor.infer(store, rows, &h),
            self.critic.infer(store, rows, &h),
        )
    }
}

/// Index of the largest logit (first on ties).
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits)`.
pub(crate) fn sample(logits: &[f64], rng: &mut impl Rng) -> usize {
    let p = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Runs a policy through its frozen encoder; greedy unless given an rng.
pub struct PolicyAgent<'a> {
    pub encoder: &'a SrlModel,
    pub policy: &'a ActorCritic,
    pub store: &'a ParamStore,
    pub sampler: Option<ChaCha8Rng>,
}

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, observations: &[&StepResult]) -> Result<Vec<usize>, AgentError> {
        let images: Vec<&Image> = observations.iter().map(|o| &o.observation).collect();
        let gts: Vec<&[f64]> = observations.iter().map(|o| o.gt_state.as_slice()).collect();
        let x = self.encoder.features_batch(&images, &gts)?;
        let (logits, _) = self.policy.infer(self.store, observations.len(), &x);
        Ok(logits
            .chunks(NUM_ACTIONS)
            .map(|l| match self.sampler.as_mut() {
                Some(rng) => sample(l, rng),
                None => argmax(l),
            })
            .collect())
    }
}
