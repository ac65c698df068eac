//! The end-to-end model: backbone features, pair-wise global matching for
//! initial flows, and recurrent refinement to full resolution.
//!
//! Pair selection is an inference flag, not an architectural change:
//! `Consecutive` estimates flow between adjacent frames, `Anchored` pairs
//! frame 0 with every later frame for tracking.

use crate::backbone::{frames_leaf, Backbone, BackboneRunner, BackboneVars};
use crate::error::{Error, Result};
use crate::matching::matching_flow_var;
use crate::params::{Binder, ParamInit, Parameters};
use crate::real::Real;
use crate::refinement::{
    flows_to_var, select_frames, var_to_flows, RefineRunner, Refiner,
};
use crate::sampling::{downsample_flow, upsample_flow_var};
use crate::types::{FlowField, ImageSequence, ModelConfig};
use crate::autodiff::{stack, Tape, Var};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which frame pairs the matching and refinement stages operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// `(i, i+1)` for flow estimation.
    Consecutive,
    /// `(0, t)` for point tracking.
    Anchored,
}

impl PairMode {
    pub fn pairs(&self, t: usize) -> Vec<(usize, usize)> {
        match self {
            PairMode::Consecutive => (0..t - 1).map(|i| (i, i + 1)).collect(),
            PairMode::Anchored => (1..t).map(|i| (0, i)).collect(),
        }
    }
}

/// Per-call inference options.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: PairMode,
    pub iters: usize,
    /// Stride-1 flow fields seeding the refinement instead of the matching
    /// output (sliding-window chaining), one per pair.
    pub seed_flows: Option<Vec<FlowField>>,
    /// With seeds present, skip the global matching stage entirely.
    pub skip_matching_when_seeded: bool,
}

impl ForwardOptions {
    pub fn new(iters: usize) -> Self {
        ForwardOptions {
            mode: PairMode::Consecutive,
            iters,
            seed_flows: None,
            skip_matching_when_seeded: false,
        }
    }

    pub fn mode(mut self, mode: PairMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Tape-level forward products, all still differentiable.
pub struct ForwardVars<'t, T: Real> {
    /// `(P, 2, H_g, W_g)` matching flows in grid-cell units.
    pub init_sg: Var<'t, T>,
    /// `(P, 2, H, W)` matching flows upsampled to pixels.
    pub init_s1: Var<'t, T>,
    /// Each refinement iterate upsampled to pixels, `(P, 2, H, W)`.
    pub iterates_s1: Vec<Var<'t, T>>,
    pub pairs: Vec<(usize, usize)>,
}

impl<'t, T: Real> ForwardVars<'t, T> {
    pub fn final_flows(&self) -> Var<'t, T> {
        *self.iterates_s1.last().expect("at least one iterate")
    }
}

/// Plain-array inference output; flows at stride 1 in pixel units.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Matching flows at the global stride, in grid-cell units.
    pub init_coarse: Vec<FlowField>,
    pub init: Vec<FlowField>,
    /// `iterates[k][p]`: pair `p` after `k+1` refinement steps.
    pub iterates: Vec<Vec<FlowField>>,
    pub flows: Vec<FlowField>,
    pub pairs: Vec<(usize, usize)>,
}

/// Trainable flow model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct FlowModel<T: Real> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    backbone: Backbone,
    refiner: Refiner,
}

impl<T: Real> FlowModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        let backbone = Backbone::new(config.clone());
        let refiner = Refiner::new(config.clone());
        {
            let mut init = ParamInit::new(&mut params, ChaCha8Rng::seed_from_u64(seed));
            backbone.init(&mut init);
            refiner.init(&mut init);
        }
        Ok(FlowModel {
            config,
            params,
            backbone,
            refiner,
        })
    }

    /// Rebuild a model around externally provided parameters (checkpoint
    /// loading). Every expected name and shape must match.
    pub fn from_parameters(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        let fresh = FlowModel::<T>::new(config.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, value) in fresh.params.iter() {
            if !params.contains(name) {
                return Err(Error::CheckpointMismatch(format!("missing parameter {name}")));
            }
            let shape = params.get(name).shape();
            if shape != value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    value.shape(),
                    shape
                )));
            }
        }
        Ok(FlowModel {
            config,
            params,
            backbone: fresh.backbone,
            refiner: fresh.refiner,
        })
    }

    pub fn backbone_runner(&self) -> BackboneRunner<'_, T> {
        BackboneRunner::new(self.config.clone(), &self.params)
    }

    pub fn refine_runner(&self) -> RefineRunner<'_, T> {
        RefineRunner::new(self.config.clone(), &self.params)
    }

    /// Zero the flow head's final layer so every refinement step becomes a
    /// no-op residual (used by the zero-residual identity checks).
    pub fn zero_flow_head(&mut self) {
        self.params.get_mut("refine.head2.w").fill(T::zero());
        self.params.get_mut("refine.head2.b").fill(T::zero());
    }

    /// Differentiable forward pass on a caller-owned tape.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        seq: &ImageSequence,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars<'t, T>> {
        Ok(self.forward_traced(tape, seq, opts)?.0)
    }

    /// Forward pass that also hands back the parameter binder, so training
    /// can map gradients to parameter names after `tape.backward`.
    pub fn forward_traced<'t, 'p>(
        &'p self,
        tape: &'t Tape<T>,
        seq: &ImageSequence,
        opts: &ForwardOptions,
    ) -> Result<(ForwardVars<'t, T>, Binder<'t, 'p, T>)> {
        self.config.check_resolution(seq.height(), seq.width())?;
        if opts.iters < 1 {
            return Err(Error::InvalidArgument("need at least one iteration".into()));
        }
        let t = seq.len();
        let pairs = opts.mode.pairs(t);
        let p = pairs.len();
        let cfg = &self.config;
        let sg = cfg.global_stride;
        let (h, w) = (seq.height(), seq.width());
        let (hg, wg) = (h / sg, w / sg);

        if let Some(seeds) = &opts.seed_flows {
            if seeds.len() != p {
                return Err(Error::InvalidArgument(format!(
                    "expected {p} seed flows, got {}",
                    seeds.len()
                )));
            }
            for s in seeds {
                if s.stride() != 1 || s.height() != h || s.width() != w {
                    return Err(Error::InvalidArgument(
                        "seed flows must be stride-1 fields at input resolution".into(),
                    ));
                }
            }
        }

        let binder = Binder::new(tape, &self.params);
        let frames = frames_leaf(tape, seq);
        let BackboneVars { quarter, fused } = self.backbone.forward(&binder, frames);

        let src_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let tgt_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let d = cfg.fuse_dim;
        let tau = cfg.temperature.resolve(d);

        let skip_matching = opts.seed_flows.is_some() && opts.skip_matching_when_seeded;
        let init_sg = if skip_matching {
            let seeds = opts.seed_flows.as_ref().unwrap();
            let coarse: Result<Vec<FlowField>> =
                seeds.iter().map(|s| downsample_flow(s, sg as u32)).collect();
            flows_to_var(tape, &coarse?)?
        } else {
            let per_pair: Vec<Var<'t, T>> = pairs
                .iter()
                .map(|&(i, j)| {
                    let f1 = fused.narrow(0, i, 1).reshape(&[d, hg, wg]);
                    let f2 = fused.narrow(0, j, 1).reshape(&[d, hg, wg]);
                    matching_flow_var(f1, f2, tau)
                })
                .collect();
            stack(&per_pair)
        };

        let seed_s4 = match &opts.seed_flows {
            Some(seeds) => {
                let coarse: Result<Vec<FlowField>> =
                    seeds.iter().map(|s| downsample_flow(s, 4)).collect();
                Some(flows_to_var(tape, &coarse?)?)
            }
            None => None,
        };

        let quarter_src = select_frames(quarter, &src_idx);
        let quarter_tgt = select_frames(quarter, &tgt_idx);
        let fused_src = select_frames(fused, &src_idx);
        let iterates_s4 = self.refiner.refine_var(
            &binder,
            init_sg,
            seed_s4,
            quarter_src,
            quarter_tgt,
            fused_src,
            opts.iters,
        );

        let init_s1 = upsample_flow_var(init_sg, sg as u32, 1);
        let iterates_s1 = iterates_s4
            .into_iter()
            .map(|f| upsample_flow_var(f, 4, 1))
            .collect();
        Ok((
            ForwardVars {
                init_sg,
                init_s1,
                iterates_s1,
                pairs,
            },
            binder,
        ))
    }

    /// Inference to plain flow fields.
    pub fn infer(&self, seq: &ImageSequence, opts: &ForwardOptions) -> Result<ModelOutput> {
        let tape: Tape<T> = Tape::new();
        let out = self.forward(&tape, seq, opts)?;
        let init_coarse = var_to_flows(&out.init_sg, self.config.global_stride as u32)?;
        let init = var_to_flows(&out.init_s1, 1)?;
        let iterates: Result<Vec<Vec<FlowField>>> = out
            .iterates_s1
            .iter()
            .map(|v| var_to_flows(v, 1))
            .collect();
        let iterates = iterates?;
        let flows = iterates.last().expect("iterates non-empty").clone();
        Ok(ModelOutput {
            init_coarse,
            init,
            iterates,
            flows,
            pairs: out.pairs,
        })
    }

    /// Gradient of `loss` for every parameter touched by this tape.
    pub fn collect_grads<'t>(
        &self,
        binder: &Binder<'t, '_, T>,
        grads: &crate::autodiff::Gradients<T>,
    ) -> std::collections::HashMap<String, ndarray::ArrayD<T>> {
        binder.collect_grads(grads)
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }
}

/// Cast all parameters to another precision (used when evaluating an f32
/// checkpoint with f64 verification paths, or vice versa).
pub fn cast_model<A: Real, B: Real>(model: &FlowModel<A>) -> Result<FlowModel<B>> {
    let mut params = Parameters::new();
    for (name, value) in model.params.iter() {
        params.insert(
            name,
            ndarray::ArrayD::from_shape_vec(
                IxDyn(value.shape()),
                value.iter().map(|&v| B::of_f64(v.as_f64())).collect(),
            )
            .unwrap(),
        );
    }
    FlowModel::from_parameters(model.config.clone(), params)
}
