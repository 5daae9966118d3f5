//! Finite-difference gradient suite over every differentiable component.
//!
//! Each row checks one component in `f64` on a small random problem:
//! its input and every parameter tensor, at most `max_entries` sampled
//! entries per tensor.

use serde::Serialize;

use crate::attention::{AttentionOrder, BlockSettings, CdaLayer, DwinBlock, GsaBlock, NdaLayer, NdaNesting};
use crate::autodiff::{gradcheck, GradcheckOptions, OpKind};
use crate::error::Result;
use crate::losses::{cross_entropy_loss, soft_dice_loss};
use crate::network::{ModelConfig, PatchMerge, Upsample};
use crate::nn::{Bindings, ParamSpec, ParamStore};
use crate::volume::LabelVolume;
use crate::windowing::WindowSpec;
use crate::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub threshold: f64,
    pub step: f64,
    pub max_entries: usize,
    pub seed: u64,
    /// Corrupts the backward rule of this primitive in every row.
    pub fault: Option<OpKind>,
    pub heads: usize,
    pub gsa_heads: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            step: 1e-4,
            max_entries: 6,
            seed: 7,
            fault: None,
            heads: 2,
            gsa_heads: 4,
            mlp_ratio: 4,
            conv_kernel: 5,
        }
    }
}

impl SuiteOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            heads: cfg.dwin_heads,
            gsa_heads: cfg.gsa_heads,
            mlp_ratio: cfg.mlp_ratio,
            conv_kernel: cfg.conv_kernel,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub component: String,
    pub tensors: usize,
    pub entries: usize,
    pub max_rel: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub threshold: f64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Volume extent used by every spatial row.
pub const EXTENT: usize = 4;
const WINDOW: usize = 2;
const DWIN_CHANNELS: usize = 6;

struct Problem {
    inputs: Vec<(String, Tensor<f64>)>,
}

impl Problem {
    fn new(x: Tensor<f64>, specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = rand_pcg::Pcg64::new(seed as u128, 0xa02b_dbf7_bb3c_0a7d_dead_beef_f00d_u128 | 1);
        let store: ParamStore<f64> = ParamStore::from_specs(specs, &mut rng)?;
        let mut inputs = vec![("input".to_string(), x)];
        inputs.extend(store.iter().map(|(k, v)| (k.clone(), perturb(v, seed ^ k.len() as u64))));
        Ok(Self { inputs })
    }

    fn bindings(&self, vars: &[Var]) -> Bindings {
        Bindings::from_vars(self.inputs[1..].iter().map(|(k, _)| k.clone()).zip(vars[1..].iter().copied()))
    }
}

/// Moves constant-initialised tensors (norm gains and offsets) off their
/// initial values so their gradients are exercised at a generic point.
fn perturb(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = rand_pcg::Pcg64::new(seed as u128 + 17, 0x1234_5679);
    let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.1, &mut rng);
    let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rand_pcg::Pcg64::new(seed as u128 + 99, 0x9e37_79b9);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

fn specs_of(f: impl FnOnce(&mut Vec<ParamSpec>)) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    f(&mut v);
    v
}

struct Runner<'a> {
    opts: &'a SuiteOptions,
    rows: Vec<SuiteRow>,
    seed: u64,
}

impl Runner<'_> {
    fn check<F>(&mut self, component: String, problem: Problem, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &Bindings, Var) -> Result<Var>,
    {
        let fault = self.opts.fault;
        let go = GradcheckOptions {
            step: self.opts.step,
            threshold: self.opts.threshold,
            max_entries: Some(self.opts.max_entries),
            seed: self.seed,
            ..GradcheckOptions::default()
        };
        self.seed += 1;
        let report = gradcheck(
            |tape, vars| {
                if let Some(kind) = fault {
                    tape.inject_fault(kind);
                }
                let p = problem.bindings(vars);
                f(tape, &p, vars[0])
            },
            &problem.inputs,
            &go,
        )?;
        self.rows.push(SuiteRow {
            component,
            tensors: report.inputs.len(),
            entries: report.inputs.iter().map(|e| e.checked).sum(),
            max_rel: report.max_rel(),
            passed: report.passed(),
        });
        Ok(())
    }
}

/// Component names in the order [`run_suite`] reports them.
pub fn component_names() -> Vec<String> {
    let mut names = vec!["stem".to_string()];
    for o in AttentionOrder::all() {
        names.push(format!("nda[{o}]"));
    }
    for o in AttentionOrder::all() {
        for n in [NdaNesting::Progressive, NdaNesting::Uniform3] {
            names.push(format!("dwin_block[{o},{n}]"));
        }
    }
    for n in ["cda", "gsa", "downsample", "upsample", "soft_dice", "cross_entropy"] {
        names.push(n.to_string());
    }
    names
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut r = Runner {
        opts,
        rows: Vec::new(),
        seed: opts.seed,
    };
    let e = EXTENT;
    let c = DWIN_CHANNELS;
    let window = WindowSpec::uniform(WINDOW)?;
    let settings = |order: AttentionOrder, nesting: NdaNesting| BlockSettings {
        window,
        order,
        nesting,
        dwin_heads: opts.heads,
        gsa_heads: opts.gsa_heads,
        mlp_ratio: opts.mlp_ratio,
        conv_kernel: opts.conv_kernel,
    };
    let s = opts.seed;

    let stem = PatchMerge::new("stem", 1, c);
    let p = Problem::new(random(&[e, e, e, 1], s), &specs_of(|v| stem.specs(v)), s)?;
    r.check("stem".into(), p, |t, b, x| stem.forward(t, b, x))?;

    for (i, order) in AttentionOrder::all().into_iter().enumerate() {
        let layer = NdaLayer::new("nda", c, window, order, NdaNesting::Progressive, opts.heads)?;
        let p = Problem::new(random(&[e, e, e, c], s + 10 + i as u64), &specs_of(|v| layer.specs(v)), s + 10 + i as u64)?;
        r.check(format!("nda[{order}]"), p, |t, b, x| layer.forward(t, b, x))?;
    }

    for (i, order) in AttentionOrder::all().into_iter().enumerate() {
        for (j, nesting) in [NdaNesting::Progressive, NdaNesting::Uniform3].into_iter().enumerate() {
            let block = DwinBlock::new("dwin", c, &settings(order, nesting))?;
            let seed = s + 20 + 2 * i as u64 + j as u64;
            let p = Problem::new(random(&[e, e, e, c], seed), &specs_of(|v| block.specs(v)), seed)?;
            r.check(format!("dwin_block[{order},{nesting}]"), p, |t, b, x| block.forward(t, b, x))?;
        }
    }

    let cda = CdaLayer::new("cda", c, window, AttentionOrder::default(), opts.heads, opts.conv_kernel)?;
    let p = Problem::new(random(&[e, e, e, c], s + 40), &specs_of(|v| cda.specs(v)), s + 40)?;
    r.check("cda".into(), p, |t, b, x| cda.forward(t, b, x))?;

    let gc = 2 * opts.gsa_heads;
    let gsa = GsaBlock::new("gsa", gc, &settings(AttentionOrder::default(), NdaNesting::Progressive))?;
    let p = Problem::new(random(&[e / 2, e / 2, e / 2, gc], s + 41), &specs_of(|v| gsa.specs(v)), s + 41)?;
    r.check("gsa".into(), p, |t, b, x| gsa.forward(t, b, x))?;

    let down = PatchMerge::new("down", c, 2 * c);
    let p = Problem::new(random(&[e, e, e, c], s + 42), &specs_of(|v| down.specs(v)), s + 42)?;
    r.check("downsample".into(), p, |t, b, x| down.forward(t, b, x))?;

    let up = Upsample::new("up", 2 * c, c);
    let p = Problem::new(random(&[e / 2, e / 2, e / 2, 2 * c], s + 43), &specs_of(|v| up.specs(v)), s + 43)?;
    r.check("upsample".into(), p, |t, b, x| up.forward(t, b, x))?;

    let k = 3;
    let labels = loss_labels([3, 3, 3], k, s + 44);
    let p = Problem::new(random(&[3, 3, 3, k], s + 44), &[], s + 44)?;
    let l = labels.clone();
    r.check("soft_dice".into(), p, move |t, _, x| soft_dice_loss(t, x, &l))?;
    let p = Problem::new(random(&[3, 3, 3, k], s + 45), &[], s + 45)?;
    r.check("cross_entropy".into(), p, move |t, _, x| cross_entropy_loss(t, x, &labels))?;

    Ok(SuiteReport {
        threshold: opts.threshold,
        rows: r.rows,
    })
}

fn loss_labels(shape: [usize; 3], k: usize, seed: u64) -> LabelVolume {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64 * 7 + seed) % k as u64) as u16).collect();
    LabelVolume::new(shape, data).expect("valid labels")
}
