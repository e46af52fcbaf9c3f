//! Segmentation architectures, selected at runtime by id.
//!
//! Both built-in variants share one layer stack (3x3 convs, ReLU, 2x2
//! max-pool, nearest 2x upsample, 1x1 heads):
//!
//! ```text
//! enc1: conv(in->16)   pool
//! enc2: conv(16->32)   pool
//! enc3: conv(32->64)
//! up, dec2: conv(64->32)   (+ enc2 before ReLU for unet_mini)
//! up, dec1: conv(32->16)   (+ enc1 before ReLU for unet_mini)
//! head.<task>: conv1x1(16->classes), no ReLU
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{
    add_assign, conv2d, conv2d_backward, gate_like, maxpool2, maxpool2_backward, pool_like, relu_backward,
    relu_inplace, upsample2, upsample2_backward,
};
use super::tensor::{Real, Tensor3};
use crate::error::{Error, Result};
use crate::labels::{validate_task_specs, TaskSpec};
use crate::rng::Lcg64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture_id: String,
    pub in_channels: usize,
    pub tasks: Vec<TaskSpec>,
}

impl ModelSpec {
    pub fn new(architecture_id: &str, in_channels: usize, tasks: Vec<TaskSpec>) -> Self {
        ModelSpec { architecture_id: architecture_id.into(), in_channels, tasks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::validation("in_channels must be positive"));
        }
        validate_task_specs(&self.tasks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    /// Inputs feeding one output unit; zero for biases.
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub info: ParamInfo,
    pub data: Vec<T>,
}

/// Named parameter tensors in the architecture's canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(layout: &[ParamInfo]) -> Self {
        ParamSet {
            tensors: layout.iter().map(|i| ParamTensor { info: i.clone(), data: vec![T::zero(); i.len()] }).collect(),
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`) drawn in layout order,
    /// zero biases.
    pub fn he_uniform(layout: &[ParamInfo], seed: u64) -> Self {
        let mut rng = Lcg64::new(seed);
        let mut set = Self::zeros(layout);
        for t in &mut set.tensors {
            if t.info.fan_in == 0 {
                continue;
            }
            let bound = (6.0 / t.info.fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = T::of((2.0 * rng.next_f64() - 1.0) * bound);
            }
        }
        set
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(T::zero());
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.info.name == name)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor { info: t.info.clone(), data: t.data.iter().map(|v| U::of(v.as_f64())).collect() })
                .collect(),
        }
    }

    /// Flat view `(tensor, element)` addressing helper.
    pub fn scalar_mut(&mut self, tensor: usize, index: usize) -> &mut T {
        &mut self.tensors[tensor].data[index]
    }
}

/// Saved activations of a forward pass; opaque to callers except for the
/// logits.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Per task, `classes x h x w`.
    pub logits: Vec<Tensor3<T>>,
    pub(crate) input: Tensor3<T>,
    pub(crate) saved: Vec<Tensor3<T>>,
    pub(crate) switches: Vec<Vec<u32>>,
}

impl<T: Real> Trace<T> {
    /// True when every ReLU gate and pooling switch agrees with `other`.
    pub fn same_pattern(&self, other: &Trace<T>) -> bool {
        self.switches == other.switches
            && self.saved.iter().zip(&other.saved).all(|(a, b)| {
                a.data.iter().zip(&b.data).all(|(x, y)| (*x > T::zero()) == (*y > T::zero()))
            })
    }
}

/// A trainable segmentation network family.
pub trait Architecture<T: Real>: Send + Sync {
    fn id(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn param_layout(&self, spec: &ModelSpec) -> Vec<ParamInfo>;

    /// Spatial sizes must be divisible by this.
    fn size_multiple(&self) -> usize;

    fn forward(&self, spec: &ModelSpec, params: &ParamSet<T>, input: &Tensor3<T>) -> Trace<T>;

    /// Forward pass with every ReLU gate and pooling switch copied from
    /// `pattern` instead of computed. Agrees with [`Architecture::forward`]
    /// wherever the patterns coincide; used to difference across kinks.
    fn forward_linearized(&self, spec: &ModelSpec, params: &ParamSet<T>, input: &Tensor3<T>, pattern: &Trace<T>) -> Trace<T>;

    /// Accumulates parameter gradients for upstream per-logit gradients.
    fn backward(&self, spec: &ModelSpec, params: &ParamSet<T>, trace: &Trace<T>, logit_grads: &[Tensor3<T>], grads: &mut ParamSet<T>);
}

/// The two built-in encoder-decoders; they differ only in the skip-adds.
pub struct MiniEncoderDecoder {
    id: &'static str,
    description: &'static str,
    skips: bool,
}

impl MiniEncoderDecoder {
    pub const FCN: MiniEncoderDecoder = MiniEncoderDecoder {
        id: "fcn_mini",
        description: "three-level conv encoder, upsampling decoder, no skips",
        skips: false,
    };
    pub const UNET: MiniEncoderDecoder = MiniEncoderDecoder {
        id: "unet_mini",
        description: "fcn_mini with additive encoder-to-decoder skip connections",
        skips: true,
    };
}

const ENC1: usize = 0;
const ENC2: usize = 2;
const ENC3: usize = 4;
const DEC2: usize = 6;
const DEC1: usize = 8;
const HEADS: usize = 10;

// indices into Trace::saved
const S_E1: usize = 0;
const S_P1: usize = 1;
const S_E2: usize = 2;
const S_P2: usize = 3;
const S_E3: usize = 4;
const S_U3: usize = 5;
const S_D2: usize = 6;
const S_U2: usize = 7;
const S_D1: usize = 8;

enum Gates<'a, T> {
    Compute,
    From(&'a Trace<T>),
}

impl MiniEncoderDecoder {
    fn conv<T: Real>(params: &ParamSet<T>, at: usize, input: &Tensor3<T>) -> Tensor3<T> {
        let w = &params.tensors[at];
        conv2d(input, &w.data, &params.tensors[at + 1].data, w.info.dims[0], w.info.dims[2])
    }

    fn run<T: Real>(&self, spec: &ModelSpec, params: &ParamSet<T>, input: &Tensor3<T>, gates: Gates<'_, T>) -> Trace<T> {
        assert_eq!(input.c, spec.in_channels, "input channels");
        let relu = |t: &mut Tensor3<T>, slot: usize| match &gates {
            Gates::Compute => relu_inplace(t),
            Gates::From(p) => gate_like(t, &p.saved[slot]),
        };
        let pool = |t: &Tensor3<T>, which: usize| match &gates {
            Gates::Compute => maxpool2(t),
            Gates::From(p) => (pool_like(t, &p.switches[which]), p.switches[which].clone()),
        };

        let mut e1 = Self::conv(params, ENC1, input);
        relu(&mut e1, S_E1);
        let (p1, sw1) = pool(&e1, 0);
        let mut e2 = Self::conv(params, ENC2, &p1);
        relu(&mut e2, S_E2);
        let (p2, sw2) = pool(&e2, 1);
        let mut e3 = Self::conv(params, ENC3, &p2);
        relu(&mut e3, S_E3);

        let u3 = upsample2(&e3);
        let mut d2 = Self::conv(params, DEC2, &u3);
        if self.skips {
            add_assign(&mut d2, &e2);
        }
        relu(&mut d2, S_D2);
        let u2 = upsample2(&d2);
        let mut d1 = Self::conv(params, DEC1, &u2);
        if self.skips {
            add_assign(&mut d1, &e1);
        }
        relu(&mut d1, S_D1);

        let logits = (0..spec.tasks.len()).map(|t| Self::conv(params, HEADS + 2 * t, &d1)).collect();
        Trace {
            logits,
            input: input.clone(),
            saved: vec![e1, p1, e2, p2, e3, u3, d2, u2, d1],
            switches: vec![sw1, sw2],
        }
    }
}

fn conv_info(name: &str, cin: usize, cout: usize, k: usize) -> [ParamInfo; 2] {
    [
        ParamInfo { name: format!("{name}.weight"), dims: vec![cout, cin, k, k], fan_in: cin * k * k },
        ParamInfo { name: format!("{name}.bias"), dims: vec![cout], fan_in: 0 },
    ]
}

impl<T: Real> Architecture<T> for MiniEncoderDecoder {
    fn id(&self) -> &'static str {
        self.id
    }

    fn description(&self) -> &'static str {
        self.description
    }

    fn size_multiple(&self) -> usize {
        4
    }

    fn param_layout(&self, spec: &ModelSpec) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        v.extend(conv_info("enc1", spec.in_channels, 16, 3));
        v.extend(conv_info("enc2", 16, 32, 3));
        v.extend(conv_info("enc3", 32, 64, 3));
        v.extend(conv_info("dec2", 64, 32, 3));
        v.extend(conv_info("dec1", 32, 16, 3));
        for t in &spec.tasks {
            v.extend(conv_info(&format!("head.{}", t.task_name), 16, t.class_count, 1));
        }
        v
    }

    fn forward(&self, spec: &ModelSpec, params: &ParamSet<T>, input: &Tensor3<T>) -> Trace<T> {
        self.run(spec, params, input, Gates::Compute)
    }

    fn forward_linearized(&self, spec: &ModelSpec, params: &ParamSet<T>, input: &Tensor3<T>, pattern: &Trace<T>) -> Trace<T> {
        self.run(spec, params, input, Gates::From(pattern))
    }

    fn backward(&self, spec: &ModelSpec, params: &ParamSet<T>, trace: &Trace<T>, logit_grads: &[Tensor3<T>], grads: &mut ParamSet<T>) {
        let s = &trace.saved;
        let mut conv_back = |at: usize, input: &Tensor3<T>, g: &Tensor3<T>, want: bool| {
            let k = params.tensors[at].info.dims[2];
            let (gw, rest) = grads.tensors.split_at_mut(at + 1);
            conv2d_backward(input, &params.tensors[at].data, g, k, &mut gw[at].data, &mut rest[0].data, want)
        };

        let d1 = &s[S_D1];
        let mut g_d1 = Tensor3::zeros(d1.c, d1.h, d1.w);
        for t in 0..spec.tasks.len() {
            let g = conv_back(HEADS + 2 * t, d1, &logit_grads[t], true).unwrap();
            add_assign(&mut g_d1, &g);
        }
        relu_backward(d1, &mut g_d1);
        let g_z1 = g_d1;
        let g_u2 = conv_back(DEC1, &s[S_U2], &g_z1, true).unwrap();
        let mut g_d2 = upsample2_backward(&g_u2);
        relu_backward(&s[S_D2], &mut g_d2);
        let g_z2 = g_d2;
        let g_u3 = conv_back(DEC2, &s[S_U3], &g_z2, true).unwrap();
        let mut g_e3 = upsample2_backward(&g_u3);
        relu_backward(&s[S_E3], &mut g_e3);
        let g_p2 = conv_back(ENC3, &s[S_P2], &g_e3, true).unwrap();
        let e2 = &s[S_E2];
        let mut g_e2 = maxpool2_backward(&g_p2, &trace.switches[1], e2.c, e2.h, e2.w);
        if self.skips {
            add_assign(&mut g_e2, &g_z2);
        }
        relu_backward(e2, &mut g_e2);
        let g_p1 = conv_back(ENC2, &s[S_P1], &g_e2, true).unwrap();
        let e1 = &s[S_E1];
        let mut g_e1 = maxpool2_backward(&g_p1, &trace.switches[0], e1.c, e1.h, e1.w);
        if self.skips {
            add_assign(&mut g_e1, &g_z1);
        }
        relu_backward(e1, &mut g_e1);
        conv_back(ENC1, &trace.input, &g_e1, false);
    }
}

/// Architectures by id.
pub struct ArchitectureRegistry<T> {
    entries: BTreeMap<&'static str, Arc<dyn Architecture<T>>>,
}

impl<T: Real> ArchitectureRegistry<T> {
    pub fn empty() -> Self {
        ArchitectureRegistry { entries: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(MiniEncoderDecoder::FCN));
        r.register(Arc::new(MiniEncoderDecoder::UNET));
        r
    }

    pub fn register(&mut self, arch: Arc<dyn Architecture<T>>) {
        self.entries.insert(arch.id(), arch);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Architecture<T>>> {
        self.entries
            .get(id)
            .cloned()
            .ok_or_else(|| Error::validation(format!("unknown architecture '{id}'")))
    }

    pub fn ids(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.values().map(|a| (a.id(), a.description())).collect()
    }
}

/// An architecture bound to a spec and its parameters.
#[derive(Clone)]
pub struct Model<T: Real> {
    pub spec: ModelSpec,
    pub arch: Arc<dyn Architecture<T>>,
    pub params: ParamSet<T>,
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).field("params", &self.params.count()).finish()
    }
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model from the built-in registry.
    pub fn build(spec: &ModelSpec, init_seed: u64) -> Result<Self> {
        Self::build_with(&ArchitectureRegistry::builtin(), spec, init_seed)
    }

    pub fn build_with(registry: &ArchitectureRegistry<T>, spec: &ModelSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = registry.get(&spec.architecture_id)?;
        let layout = arch.param_layout(spec);
        Ok(Model { spec: spec.clone(), params: ParamSet::he_uniform(&layout, init_seed), arch })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(spec: &ModelSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let arch = ArchitectureRegistry::builtin().get(&spec.architecture_id)?;
        let layout = arch.param_layout(spec);
        let got: Vec<&ParamInfo> = params.tensors.iter().map(|t| &t.info).collect();
        if got.len() != layout.len() || got.iter().zip(&layout).any(|(a, b)| a.name != b.name || a.dims != b.dims) {
            return Err(Error::validation("parameters do not match the model spec"));
        }
        Ok(Model { spec: spec.clone(), arch, params })
    }

    pub fn layout(&self) -> Vec<ParamInfo> {
        self.arch.param_layout(&self.spec)
    }

    pub fn check_input(&self, input: &Tensor3<T>) -> Result<()> {
        let m = self.arch.size_multiple();
        if input.c != self.spec.in_channels {
            return Err(Error::validation(format!(
                "input has {} channels, model expects {}",
                input.c, self.spec.in_channels
            )));
        }
        if input.h == 0 || input.w == 0 || input.h % m != 0 || input.w % m != 0 {
            return Err(Error::validation(format!("spatial size {}x{} must be a positive multiple of {m}", input.h, input.w)));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor3<T>) -> Result<Trace<T>> {
        self.check_input(input)?;
        Ok(self.arch.forward(&self.spec, &self.params, input))
    }

    pub fn backward(&self, trace: &Trace<T>, logit_grads: &[Tensor3<T>], grads: &mut ParamSet<T>) {
        self.arch.backward(&self.spec, &self.params, trace, logit_grads, grads)
    }

    pub fn zero_grads(&self) -> ParamSet<T> {
        ParamSet::zeros(&self.layout())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: &str, in_ch: usize, tasks: &[(&str, usize)]) -> ModelSpec {
        ModelSpec::new(arch, in_ch, tasks.iter().map(|(n, c)| TaskSpec::new(*n, *c)).collect())
    }

    #[test]
    fn parameter_count_closed_form() {
        let layers = [(4, 16, 3), (16, 32, 3), (32, 64, 3), (64, 32, 3), (32, 16, 3), (16, 2, 1)];
        let expect: usize = layers.iter().map(|&(cin, cout, k)| k * k * cin * cout + cout).sum();
        assert_eq!(expect, 46850);
        let m = Model::<f32>::build(&spec("fcn_mini", 4, &[("a", 2)]), 1).unwrap();
        assert_eq!(m.params.count(), expect);
    }

    #[test]
    fn unknown_architecture() {
        assert!(matches!(Model::<f32>::build(&spec("segnet", 4, &[("a", 2)]), 1), Err(Error::Validation(_))));
        assert_eq!(ArchitectureRegistry::<f32>::builtin().ids(), vec!["fcn_mini", "unet_mini"]);
    }

    #[test]
    fn logits_shape() {
        let m = Model::<f32>::build(&spec("unet_mini", 4, &[("a", 2)]), 3).unwrap();
        let t = m.forward(&Tensor3::zeros(4, 16, 16)).unwrap();
        assert_eq!(t.logits.len(), 1);
        assert_eq!((t.logits[0].c, t.logits[0].h, t.logits[0].w), (2, 16, 16));
        assert!(m.forward(&Tensor3::zeros(3, 16, 16)).is_err());
        assert!(m.forward(&Tensor3::zeros(4, 10, 16)).is_err());
    }

    #[test]
    fn zero_weights_zero_logits() {
        let mut m = Model::<f32>::build(&spec("fcn_mini", 2, &[("a", 3)]), 3).unwrap();
        m.params.fill_zero();
        let t = m.forward(&Tensor3::zeros(2, 8, 8)).unwrap();
        assert!(t.logits[0].data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn variants_share_initialization() {
        let a = Model::<f32>::build(&spec("fcn_mini", 3, &[("a", 2)]), 9).unwrap();
        let b = Model::<f32>::build(&spec("unet_mini", 3, &[("a", 2)]), 9).unwrap();
        assert_eq!(a.params, b.params);
        // zero input: e1 = relu(bias) = 0 and e2 = 0, so skip-adds contribute nothing
        let zero = Tensor3::zeros(3, 8, 8);
        assert_eq!(a.forward(&zero).unwrap().logits, b.forward(&zero).unwrap().logits);
        let mut rng = Lcg64::new(1);
        let x = Tensor3::from_vec(3, 8, 8, (0..192).map(|_| rng.next_f64() as f32).collect());
        assert_ne!(a.forward(&x).unwrap().logits, b.forward(&x).unwrap().logits);
    }

    #[test]
    fn forward_is_deterministic_and_linearized_agrees() {
        let m = Model::<f64>::build(&spec("unet_mini", 2, &[("a", 2), ("b", 3)]), 4).unwrap();
        let mut rng = Lcg64::new(2);
        let x = Tensor3::from_vec(2, 8, 8, (0..128).map(|_| rng.next_f64() - 0.5).collect());
        let t1 = m.forward(&x).unwrap();
        let t2 = m.forward(&x).unwrap();
        assert_eq!(t1.logits, t2.logits);
        let lin = m.arch.forward_linearized(&m.spec, &m.params, &x, &t1);
        assert_eq!(lin.logits, t1.logits);
        assert!(lin.same_pattern(&t1));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::<f64>::build(&spec("unet_mini", 2, &[("a", 2)]), 4).unwrap();
        let mut rng = Lcg64::new(8);
        let x = Tensor3::from_vec(2, 8, 8, (0..128).map(|_| rng.next_f64()).collect());
        let t = m.forward(&x).unwrap();
        let mut g = m.zero_grads();
        m.backward(&t, &[Tensor3::zeros(2, 8, 8)], &mut g);
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }
}
