//! Query-guided prototype adaption: channel-wise cross attention between
//! query and support features that rewrites each prototype toward the query
//! feature distribution.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore, TapeParams};
use crate::prototype::{mean_of_rows, PrototypeSet, ProtoVars, Provenance};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

pub const PREFIX: &str = "qgpa.";
pub const W_Q: &str = "qgpa.w_q";
pub const W_K: &str = "qgpa.w_k";
pub const W_V: &str = "qgpa.w_v";
pub const W_P: &str = "qgpa.w_p";

/// Hidden point count used at full scale.
pub const FULL_SCALE_HIDDEN: usize = 512;
pub const DEFAULT_HIDDEN: usize = 64;

/// Single layer, single head, no attention dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QgpaConfig {
    /// Points per block `N`; the query and key projections are tied to it.
    pub points: usize,
    /// Hidden point count `N'`.
    pub hidden: usize,
    /// Feature width `d`.
    pub dim: usize,
}

impl QgpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::config("qgpa sizes must be positive"));
        }
        if self.hidden > self.points {
            return Err(Error::config(alloc::format!(
                "qgpa hidden points {} exceed block points {}",
                self.hidden,
                self.points
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QgpaWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_p: Tensor,
}

impl QgpaWeights {
    /// `W_p` starts at zero so the module begins as the identity. `W_q` and
    /// `W_k` are small and positive, so query and key start close to scaled
    /// channel means and do not depend on point order.
    pub fn init(cfg: &QgpaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let pb = 1.0 / (cfg.points as f64 * libm::sqrt(cfg.hidden as f64));
        let db = 1.0 / libm::sqrt(cfg.dim as f64);
        let positive = |rng: &mut Rng| uniform(&[cfg.points, cfg.hidden], pb, rng).map(|v| v + pb);
        Ok(QgpaWeights {
            w_q: positive(rng),
            w_k: positive(rng),
            w_v: uniform(&[cfg.dim, cfg.dim], db, rng),
            w_p: Tensor::zeros(&[cfg.dim, cfg.dim]),
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = QgpaWeights {
            w_q: store.get(W_Q)?.clone(),
            w_k: store.get(W_K)?.clone(),
            w_v: store.get(W_V)?.clone(),
            w_p: store.get(W_P)?.clone(),
        };
        w.config()?;
        Ok(w)
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        store.insert(W_Q, self.w_q.clone());
        store.insert(W_K, self.w_k.clone());
        store.insert(W_V, self.w_v.clone());
        store.insert(W_P, self.w_p.clone());
    }

    /// Sizes implied by the weight shapes.
    pub fn config(&self) -> Result<QgpaConfig> {
        let (n, h) = self.w_q.dims2();
        let d = self.w_v.rows();
        if self.w_k.shape() != [n, h] {
            return Err(Error::shape("qgpa_weights", self.w_q.shape(), self.w_k.shape()));
        }
        if self.w_v.shape() != [d, d] || self.w_p.shape() != [d, d] {
            return Err(Error::shape("qgpa_weights", self.w_v.shape(), self.w_p.shape()));
        }
        let cfg = QgpaConfig { points: n, hidden: h, dim: d };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// QGPA weights registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QgpaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_p: Var,
}

impl QgpaVars {
    pub fn from_params(params: &TapeParams) -> Result<Self> {
        Ok(QgpaVars {
            w_q: params.var(W_Q)?,
            w_k: params.var(W_K)?,
            w_v: params.var(W_V)?,
            w_p: params.var(W_P)?,
        })
    }

    pub fn constants(tape: &mut Tape, w: &QgpaWeights) -> Self {
        QgpaVars {
            w_q: tape.constant(w.w_q.clone()),
            w_k: tape.constant(w.w_k.clone()),
            w_v: tape.constant(w.w_v.clone()),
            w_p: tape.constant(w.w_p.clone()),
        }
    }
}

/// Channel attention, d × d, rows on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub attn: Tensor,
}

/// Mean support feature map per prototype: index 0 averages all shots,
/// index `c` averages the shots of class `c`.
pub fn average_support_features_on(tape: &mut Tape, support: &[Vec<Var>]) -> Result<Vec<Var>> {
    let all: Vec<Var> = support.iter().flatten().copied().collect();
    let shape = tape.shape(*all.first().ok_or(Error::Empty("support features"))?).to_vec();
    for &f in &all {
        if tape.shape(f) != shape.as_slice() {
            return Err(Error::shape("average_support_features", &shape, tape.shape(f)));
        }
    }
    let mut out = Vec::with_capacity(support.len() + 1);
    out.push(mean_of_rows(tape, &all)?);
    for shots in support {
        out.push(mean_of_rows(tape, shots)?);
    }
    Ok(out)
}

pub fn average_support_features(support: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = support
        .iter()
        .map(|s| s.iter().map(|f| tape.constant(f.clone())).collect())
        .collect();
    let avg = average_support_features_on(&mut tape, &vars)?;
    Ok(avg.into_iter().map(|v| tape.value(v).clone()).collect())
}

fn check_features(tape: &Tape, f: Var, w: &QgpaVars) -> Result<()> {
    let n = tape.shape(w.w_q)[0];
    let d = tape.shape(w.w_v)[0];
    if tape.shape(f) != [n, d] {
        return Err(Error::shape("qgpa_features", tape.shape(f), &[n, d]));
    }
    Ok(())
}

/// `softmax_rows(query · keyᵀ / √d)` on the tape.
pub fn attention_on(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let d = tape.shape(query)[0];
    let kt = tape.transpose(key)?;
    let logits = tape.matmul(query, kt)?;
    let logits = tape.scale(logits, 1.0 / libm::sqrt(d as f64))?;
    tape.softmax_rows(logits)
}

/// Adapts one 1×d prototype `p` using the averaged support features `fs`
/// of its class and the query features `fq`, both N×d. Returns the adapted
/// prototype and the attention map.
pub fn adapt_prototype_on(
    tape: &mut Tape,
    p: Var,
    fs: Var,
    fq: Var,
    w: &QgpaVars,
) -> Result<(Var, Var)> {
    check_features(tape, fs, w)?;
    check_features(tape, fq, w)?;
    let fqt = tape.transpose(fq)?;
    let query = tape.matmul(fqt, w.w_q)?;
    let fst = tape.transpose(fs)?;
    let key = tape.matmul(fst, w.w_k)?;
    let value = tape.matmul(p, w.w_v)?;
    let attn = attention_on(tape, query, key)?;
    let vt = tape.transpose(value)?;
    let mixed = tape.matmul(attn, vt)?;
    let update = tape.matmul(w.w_p, mixed)?;
    let update = tape.transpose(update)?;
    Ok((tape.add(p, update)?, attn))
}

/// Adapts all C+1 prototypes against one query.
pub fn adapt_all_on(
    tape: &mut Tape,
    protos: ProtoVars,
    support: &[Vec<Var>],
    fq: Var,
    w: &QgpaVars,
) -> Result<ProtoVars> {
    let rows = tape.shape(protos.var)[0];
    if rows != support.len() + 1 {
        return Err(Error::shape("adapt_all", tape.shape(protos.var), &[support.len() + 1]));
    }
    let averaged = average_support_features_on(tape, support)?;
    let mut adapted = Vec::with_capacity(rows);
    for (i, &fs) in averaged.iter().enumerate() {
        let p = tape.gather_rows(protos.var, &[i])?;
        adapted.push(adapt_prototype_on(tape, p, fs, fq, w)?.0);
    }
    Ok(ProtoVars {
        var: tape.concat_rows(&adapted)?,
        provenance: Provenance::Adapted,
    })
}

pub fn attention(query: &Tensor, key: &Tensor) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let (q, k) = (tape.constant(query.clone()), tape.constant(key.clone()));
    let a = attention_on(&mut tape, q, k)?;
    Ok(AttentionMap {
        attn: tape.value(a).clone(),
    })
}

/// Adapted 1×d prototype together with the attention map used.
pub fn adapt_prototype(
    p: &Tensor,
    fs: &Tensor,
    fq: &Tensor,
    w: &QgpaWeights,
) -> Result<(Tensor, AttentionMap)> {
    w.config()?;
    let mut tape = Tape::new();
    let wv = QgpaVars::constants(&mut tape, w);
    let (pv, sv, qv) = (
        tape.constant(p.clone()),
        tape.constant(fs.clone()),
        tape.constant(fq.clone()),
    );
    let (out, attn) = adapt_prototype_on(&mut tape, pv, sv, qv, &wv)?;
    Ok((
        tape.value(out).clone(),
        AttentionMap {
            attn: tape.value(attn).clone(),
        },
    ))
}

pub fn adapt_all(
    protos: &PrototypeSet,
    support: &[Vec<Tensor>],
    fq: &Tensor,
    w: &QgpaWeights,
) -> Result<PrototypeSet> {
    w.config()?;
    let mut tape = Tape::new();
    let wv = QgpaVars::constants(&mut tape, w);
    let pv = ProtoVars {
        var: tape.constant(protos.vectors.clone()),
        provenance: protos.provenance,
    };
    let sv: Vec<Vec<Var>> = support
        .iter()
        .map(|s| s.iter().map(|f| tape.constant(f.clone())).collect())
        .collect();
    let qv = tape.constant(fq.clone());
    let out = adapt_all_on(&mut tape, pv, &sv, qv, &wv)?;
    PrototypeSet::new(tape.value(out.var).clone(), Provenance::Adapted)
}
