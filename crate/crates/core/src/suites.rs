//! Named gradient-check suites over every learnable path, at toy sizes.
//!
//! Each case checks one differentiable path with central differences. Cases
//! in the `tensor` scope exercise one op each, so a wrong adjoint is reported
//! under the op's own name.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_on, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::params::{uniform, TapeParams};
use crate::projection::{self, MmdConfig, ProjectionConfig};
use crate::prototype::{masked_average_pool_on, segmentation_loss_on, ProtoVars, Provenance};
use crate::qgpa::{self, QgpaConfig, QgpaVars, QgpaWeights};
use crate::self_recon::self_reconstruct_on;
use crate::tape::{OpKind, Tape, Unary, Var};
use crate::tensor::Tensor;
use crate::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Tensor,
    Backbone,
    Qgpa,
    Sr,
    Mmd,
    All,
}

impl Scope {
    pub const CONCRETE: [Scope; 5] = [Scope::Tensor, Scope::Backbone, Scope::Qgpa, Scope::Sr, Scope::Mmd];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Backbone => "backbone",
            Scope::Qgpa => "qgpa",
            Scope::Sr => "sr",
            Scope::Mmd => "mmd",
            Scope::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scope::CONCRETE
            .iter()
            .chain(&[Scope::All])
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(alloc::format!("unknown gradcheck scope `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub scope: Scope,
    pub name: String,
    pub report: GradCheckReport,
}

type CaseFn = fn(&dyn Fn() -> Tape) -> Result<GradCheckReport>;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 1.0, &mut derive_rng(seed, 0x6C))
}

fn check<F>(make: &dyn Fn() -> Tape, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_on(make, f, inputs, DEFAULT_STEP, DEFAULT_TOL)
}

/// Weighted sum so that every output coordinate gets a distinct adjoint.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand(tape.shape(out), seed));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn toy_xyz(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let t = rand(&[n, 3], seed);
    (0..n).map(|i| core::array::from_fn(|a| t.data()[i * 3 + a])).collect()
}

fn tensor_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |m| {
            check(m, &[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                probe(t, o, 3)
            })
        }),
        ("transpose", |m| {
            check(m, &[rand(&[3, 4], 4)], |t, v| {
                let o = t.transpose(v[0])?;
                probe(t, o, 5)
            })
        }),
        ("add", |m| {
            check(m, &[rand(&[2, 3], 6), rand(&[2, 3], 7)], |t, v| {
                let o = t.add(v[0], v[1])?;
                probe(t, o, 8)
            })
        }),
        ("sub", |m| {
            check(m, &[rand(&[2, 3], 9), rand(&[2, 3], 10)], |t, v| {
                let o = t.sub(v[0], v[1])?;
                probe(t, o, 11)
            })
        }),
        ("mul", |m| {
            check(m, &[rand(&[2, 3], 12), rand(&[2, 3], 13)], |t, v| {
                let o = t.mul(v[0], v[1])?;
                probe(t, o, 14)
            })
        }),
        ("add_row", |m| {
            check(m, &[rand(&[4, 3], 15), rand(&[1, 3], 16)], |t, v| {
                let o = t.add_row(v[0], v[1])?;
                probe(t, o, 17)
            })
        }),
        ("unary", |m| {
            check(m, &[rand(&[3, 3], 18)], |t, v| {
                let a = t.unary(v[0], Unary::LeakyRelu(0.2))?;
                let b = t.unary(a, Unary::Exp)?;
                let c = t.unary(b, Unary::Scale(0.7))?;
                let d = t.unary(c, Unary::Negate)?;
                probe(t, d, 19)
            })
        }),
        ("softmax_rows", |m| {
            check(m, &[rand(&[3, 4], 20)], |t, v| {
                let o = t.softmax_rows(v[0])?;
                probe(t, o, 21)
            })
        }),
        ("log_softmax_rows", |m| {
            check(m, &[rand(&[3, 4], 22)], |t, v| {
                let o = t.log_softmax_rows(v[0])?;
                probe(t, o, 23)
            })
        }),
        ("sum", |m| {
            check(m, &[rand(&[3, 2], 24)], |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            })
        }),
        ("normalize_rows", |m| {
            check(m, &[rand(&[3, 4], 25)], |t, v| {
                let o = t.normalize_rows(v[0])?;
                probe(t, o, 26)
            })
        }),
        ("concat_cols", |m| {
            check(m, &[rand(&[3, 2], 27), rand(&[3, 1], 28)], |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                probe(t, o, 29)
            })
        }),
        ("concat_rows", |m| {
            check(m, &[rand(&[2, 3], 30), rand(&[1, 3], 31)], |t, v| {
                let o = t.concat_rows(&[v[0], v[1]])?;
                probe(t, o, 32)
            })
        }),
        ("gather_rows", |m| {
            check(m, &[rand(&[4, 2], 33)], |t, v| {
                let o = t.gather_rows(v[0], &[3, 0, 0, 2, 1])?;
                probe(t, o, 34)
            })
        }),
        ("neighbor_max", |m| {
            let neighbors = backbone::knn_graph(&toy_xyz(8, 35), 3)?;
            check(m, &[rand(&[8, 3], 36)], move |t, v| {
                let o = t.neighbor_max(v[0], &neighbors, 3)?;
                probe(t, o, 37)
            })
        }),
        ("pairwise_sq_dist", |m| {
            check(m, &[rand(&[3, 2], 38), rand(&[4, 2], 39)], |t, v| {
                let o = t.pairwise_sq_dist(v[0], v[1])?;
                probe(t, o, 40)
            })
        }),
    ]
}

fn toy_backbone() -> BackboneConfig {
    BackboneConfig {
        knn_k: 4,
        stage_dims: vec![4, 6],
        output_dim: 8,
        use_multiscale: true,
        slope: 0.2,
    }
}

fn toy_input(n: usize, seed: u64) -> Tensor {
    let mut t = rand(&[n, crate::data::FEATURE_DIM], seed);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    t
}

fn input_xyz(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.rows()).map(|i| core::array::from_fn(|a| t.row_slice(i)[a])).collect()
}

/// Two-way, one-shot toy layout: one support per class plus a query.
fn toy_masks(n: usize) -> Vec<Vec<Vec<bool>>> {
    vec![
        vec![(0..n).map(|i| i % 3 == 0).collect()],
        vec![(0..n).map(|i| i % 3 == 1).collect()],
    ]
}

fn backbone_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("edgeconv_forward", |m| {
            let cfg = toy_backbone();
            let store = backbone::init_backbone(&cfg, &mut derive_rng(41, 0))?;
            let names: Vec<String> = store.names().map(String::from).collect();
            let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            let x = toy_input(24, 42);
            let neighbors = backbone::knn_graph(&input_xyz(&x), cfg.knn_k)?;
            check(m, &inputs, |t, v| {
                let params = TapeParams::from_vars(names.iter().cloned().zip(v.iter().copied()));
                let xv = t.constant(x.clone());
                let out = backbone::forward(t, &cfg, &params, xv, &neighbors)?;
                probe(t, out, 43)
            })
        }),
        ("map_score_segmentation_loss", |m| {
            let n = 12;
            let masks = toy_masks(n);
            let labels: Vec<usize> = (0..n).map(|i| (i + 1) % 3).collect();
            let inputs = [rand(&[n, 6], 44), rand(&[n, 6], 45), rand(&[n, 6], 46)];
            check(m, &inputs, |t, v| {
                let protos = masked_average_pool_on(t, &[vec![v[0]], vec![v[1]]], &masks)?;
                segmentation_loss_on(t, v[2], protos.var, &labels, 5.0)
            })
        }),
    ]
}

fn qgpa_cases() -> Vec<(&'static str, CaseFn)> {
    vec![("adapt_all", |m| {
        let (n, d) = (10, 5);
        let cfg = QgpaConfig { points: n, hidden: 4, dim: d };
        let mut w = QgpaWeights::init(&cfg, &mut derive_rng(47, 0))?;
        w.w_p = rand(&[d, d], 48);
        let inputs = [
            w.w_q, w.w_k, w.w_v, w.w_p,
            rand(&[3, d], 49),
            rand(&[n, d], 50),
            rand(&[n, d], 51),
            rand(&[n, d], 52),
        ];
        check(m, &inputs, |t, v| {
            let wv = QgpaVars { w_q: v[0], w_k: v[1], w_v: v[2], w_p: v[3] };
            let protos = ProtoVars { var: v[4], provenance: Provenance::Original };
            let out = qgpa::adapt_all_on(t, protos, &[vec![v[5]], vec![v[6]]], v[7], &wv)?;
            probe(t, out.var, 53)
        })
    })]
}

fn sr_cases() -> Vec<(&'static str, CaseFn)> {
    vec![("self_reconstruct", |m| {
        let n = 12;
        let masks: Vec<Vec<Vec<bool>>> = vec![
            vec![(0..n).map(|i| i % 3 == 0).collect(), (0..n).map(|i| i % 4 == 1).collect()],
            vec![(0..n).map(|i| i % 3 == 1).collect(), (0..n).map(|i| i % 4 == 2).collect()],
        ];
        let inputs = [rand(&[n, 5], 54), rand(&[n, 5], 55), rand(&[n, 5], 56), rand(&[n, 5], 57)];
        check(m, &inputs, |t, v| {
            let support = [vec![v[0], v[1]], vec![v[2], v[3]]];
            let protos = masked_average_pool_on(t, &support, &masks)?;
            self_reconstruct_on(t, &support, &masks, protos, 5.0)
        })
    })]
}

fn mmd_cases() -> Vec<(&'static str, CaseFn)> {
    vec![("projection_mmd", |m| {
        let cfg = ProjectionConfig { dropout: 0.0, ..ProjectionConfig::new(4, 3) };
        let store = projection::init_projection(&cfg, &mut derive_rng(58, 0))?;
        let names: Vec<String> = store.names().map(String::from).collect();
        let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let embeds = rand(&[3, 4], 59);
        let mut target = rand(&[3, 3], 60);
        target.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let mmd = MmdConfig::default();
        check(m, &inputs, |t, v| {
            let params = TapeParams::from_vars(names.iter().cloned().zip(v.iter().copied()));
            let e = t.constant(embeds.clone());
            let tgt = t.constant(target.clone());
            let p = projection::project_on(t, e, &params, &cfg, None)?;
            projection::mmd_on(t, tgt, p, &mmd)
        })
    })]
}

fn cases(scope: Scope) -> Vec<(&'static str, CaseFn)> {
    match scope {
        Scope::Tensor => tensor_cases(),
        Scope::Backbone => backbone_cases(),
        Scope::Qgpa => qgpa_cases(),
        Scope::Sr => sr_cases(),
        Scope::Mmd => mmd_cases(),
        Scope::All => Vec::new(),
    }
}

/// Runs every case of `scope`. With `fault`, the adjoint of that op is
/// corrupted on every tape, which needs the `fault-injection` feature.
pub fn run(scope: Scope, fault: Option<OpKind>) -> Result<Vec<CaseReport>> {
    let make = tape_factory(fault)?;
    let scopes: Vec<Scope> = match scope {
        Scope::All => Scope::CONCRETE.to_vec(),
        s => vec![s],
    };
    let mut out = Vec::new();
    for s in scopes {
        for (name, case) in cases(s) {
            out.push(CaseReport { scope: s, name: name.into(), report: case(&make)? });
        }
    }
    Ok(out)
}

#[cfg(any(test, feature = "fault-injection"))]
fn tape_factory(fault: Option<OpKind>) -> Result<impl Fn() -> Tape> {
    Ok(move || {
        let mut t = Tape::new();
        if let Some(kind) = fault {
            t.inject_fault(kind);
        }
        t
    })
}

#[cfg(not(any(test, feature = "fault-injection")))]
fn tape_factory(fault: Option<OpKind>) -> Result<impl Fn() -> Tape> {
    match fault {
        Some(_) => Err(Error::config("fault injection is not compiled into this build")),
        None => Ok(Tape::new),
    }
}
