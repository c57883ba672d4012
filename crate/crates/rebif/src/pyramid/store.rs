//! Named parameter storage, checkpoint serialization, and the graph bank
//! that exposes stored parameters as trainable tape leaves.
//!
//! A [`ParamStore`] holds convolutions in a fixed order — the order of the
//! [`LayerPlan`] it was initialized from — so weight updates, checkpoints,
//! and reloads are all deterministic. [`StoreBank`] binds every stored
//! parameter into a [`Graph`] once, up front, and remembers the leaf ids so
//! a training step can read gradients back per layer.

use std::fmt::Write as _;

use crate::tensor::graph::{Graph, VarId};
use crate::tensor::ops::ConvParams;
use crate::tensor::rng::Rng;
use crate::tensor::text::snip;
use crate::tensor::{Shape4, Tensor4};

use super::cost::LayerPlan;
use super::graphs::ConvBank;
use super::PyramidError;

/// Ordered collection of named convolution parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ConvParams)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// He-initializes one convolution per plan entry. Each layer's weights
    /// are drawn from a stream forked off the layer *name*, so a layer keeps
    /// identical initial weights across variants and scale counts that share
    /// it.
    pub fn init_from_plan(plan: &[LayerPlan], rng: &Rng) -> Result<Self, PyramidError> {
        let mut store = ParamStore::new();
        for p in plan {
            let params = ConvParams::he_init(
                p.c_out,
                p.c_in,
                p.k,
                p.stride,
                p.padding,
                &mut rng.fork(&p.name),
            )?;
            store.insert(&p.name, params)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, params: ConvParams) -> Result<(), PyramidError> {
        if self.get(name).is_some() {
            return Err(PyramidError::DuplicateLayer {
                name: name.to_string(),
            });
        }
        self.entries.push((name.to_string(), params));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ConvParams> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ConvParams> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConvParams)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ConvParams)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars across all layers.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.param_count()).sum()
    }

    /// Verifies that this store lists exactly the plan's layers, in plan
    /// order, with matching geometry — the check run when a checkpoint is
    /// loaded against a config.
    pub fn check_against_plan(&self, plan: &[LayerPlan]) -> Result<(), PyramidError> {
        if self.len() != plan.len() {
            return Err(PyramidError::WrongLength {
                what: "checkpoint layers",
                expected: plan.len(),
                got: self.len(),
            });
        }
        for ((name, params), p) in self.entries.iter().zip(plan) {
            if *name != p.name {
                return Err(PyramidError::UnknownLayer { name: name.clone() });
            }
            if params.c_in() != p.c_in {
                return Err(PyramidError::WidthMismatch {
                    what: "checkpoint layer input channels",
                    expected: p.c_in,
                    got: params.c_in(),
                });
            }
            if params.c_out() != p.c_out {
                return Err(PyramidError::WidthMismatch {
                    what: "checkpoint layer output channels",
                    expected: p.c_out,
                    got: params.c_out(),
                });
            }
            if params.k() != p.k || params.stride != p.stride || params.padding != p.padding {
                return Err(PyramidError::WidthMismatch {
                    what: "checkpoint layer kernel geometry",
                    expected: p.k,
                    got: params.k(),
                });
            }
        }
        Ok(())
    }
}

/// A [`ConvBank`] whose layers are tape leaves bound from a store, in store
/// order, so gradients can be read back after a backward pass.
pub struct StoreBank {
    entries: Vec<(String, VarId, VarId, usize, usize)>,
}

impl StoreBank {
    /// Pushes every stored weight and bias into the graph as a leaf.
    pub fn bind(g: &mut Graph, store: &ParamStore) -> StoreBank {
        let entries = store
            .iter()
            .map(|(name, p)| {
                let w = g.leaf(p.weight.clone());
                let b = g.leaf(p.bias.clone());
                (name.to_string(), w, b, p.stride, p.padding)
            })
            .collect();
        StoreBank { entries }
    }

    /// `(name, weight leaf, bias leaf)` per layer, in store order.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, VarId, VarId)> {
        self.entries.iter().map(|(n, w, b, _, _)| (n.as_str(), *w, *b))
    }
}

impl ConvBank for StoreBank {
    fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, ..)| n == name)
    }

    fn conv_node(
        &mut self,
        g: &mut Graph,
        name: &str,
        x: VarId,
    ) -> Result<VarId, PyramidError> {
        let &(_, w, b, stride, padding) = self
            .entries
            .iter()
            .find(|(n, ..)| n == name)
            .ok_or_else(|| PyramidError::UnknownLayer {
                name: name.to_string(),
            })?;
        Ok(g.conv2d(x, w, b, stride, padding)?)
    }
}

/// Errors from reading a checkpoint back in.
#[derive(Debug, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: expected header `ckpt v1 <layers>`")]
    BadMagic,
    #[error("checkpoint ends where {what} was expected")]
    Truncated { what: &'static str },
    #[error("bad {what} token {token:?}")]
    BadField { what: &'static str, token: String },
    #[error("layer {name:?} declares more values than fit in memory")]
    Overflow { name: String },
    #[error("layer {name:?} declares {expected} values but {got} remain")]
    CountMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {token:?} in layer {name:?}")]
    NonFinite { name: String, token: String },
    #[error("trailing data after the declared layers")]
    TrailingData,
    #[error(transparent)]
    Layer(#[from] PyramidError),
}

/// Serializes a store: a `ckpt v1 <layers>` header, then per layer a
/// descriptor line `<name> <c_out> <c_in> <k> <stride> <padding>`, the
/// weight values (one output channel per line), and the bias line. Values
/// use shortest-round-trip formatting, so save/load/save is byte-identical.
pub fn write_checkpoint(store: &ParamStore) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ckpt v1 {}", store.len());
    for (name, p) in store.iter() {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            name,
            p.c_out(),
            p.c_in(),
            p.k(),
            p.stride,
            p.padding
        );
        let per_row = p.c_in() * p.k() * p.k();
        for row in p.weight.data().chunks(per_row) {
            push_row(&mut out, row);
        }
        push_row(&mut out, p.bias.data());
    }
    out
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn parse_usize(tok: Option<&&str>, what: &'static str) -> Result<usize, CheckpointError> {
    let tok = tok.ok_or(CheckpointError::Truncated { what })?;
    tok.parse().map_err(|_| CheckpointError::BadField {
        what,
        token: snip(tok),
    })
}

/// Parses [`write_checkpoint`] output. Token counts are verified against
/// each layer's declared geometry before any tensor is allocated, so hostile
/// headers cannot trigger huge allocations.
pub fn read_checkpoint(text: &str) -> Result<ParamStore, CheckpointError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() < 3 || toks[0] != "ckpt" || toks[1] != "v1" {
        return Err(CheckpointError::BadMagic);
    }
    let n_layers = parse_usize(Some(&toks[2]), "layer count")?;
    let mut cursor = 3;
    let mut store = ParamStore::new();
    for _ in 0..n_layers {
        let name = *toks
            .get(cursor)
            .ok_or(CheckpointError::Truncated { what: "layer name" })?;
        cursor += 1;
        let c_out = parse_usize(toks.get(cursor), "output channels")?;
        let c_in = parse_usize(toks.get(cursor + 1), "input channels")?;
        let k = parse_usize(toks.get(cursor + 2), "kernel size")?;
        let stride = parse_usize(toks.get(cursor + 3), "stride")?;
        let padding = parse_usize(toks.get(cursor + 4), "padding")?;
        cursor += 5;

        let w_count = c_out
            .checked_mul(c_in)
            .and_then(|n| n.checked_mul(k))
            .and_then(|n| n.checked_mul(k))
            .ok_or_else(|| CheckpointError::Overflow {
                name: snip(name),
            })?;
        let expected = w_count
            .checked_add(c_out)
            .ok_or_else(|| CheckpointError::Overflow {
                name: snip(name),
            })?;
        if toks.len() - cursor < expected {
            return Err(CheckpointError::CountMismatch {
                name: snip(name),
                expected,
                got: toks.len() - cursor,
            });
        }

        let mut read_values = |count: usize| -> Result<Vec<f64>, CheckpointError> {
            let mut data = Vec::with_capacity(count);
            for tok in &toks[cursor..cursor + count] {
                let v: f64 = tok.parse().map_err(|_| CheckpointError::BadField {
                    what: "value",
                    token: snip(tok),
                })?;
                if !v.is_finite() {
                    return Err(CheckpointError::NonFinite {
                        name: snip(name),
                        token: snip(tok),
                    });
                }
                data.push(v);
            }
            cursor += count;
            Ok(data)
        };
        let w_data = read_values(w_count)?;
        let b_data = read_values(c_out)?;

        let weight = Tensor4::from_vec(Shape4::new(c_out, c_in, k, k), w_data)
            .map_err(PyramidError::Tensor)?;
        let bias = Tensor4::from_vec(Shape4::new(1, c_out, 1, 1), b_data)
            .map_err(PyramidError::Tensor)?;
        let params =
            ConvParams::new(weight, bias, stride, padding).map_err(PyramidError::Tensor)?;
        store.insert(name, params)?;
    }
    if cursor != toks.len() {
        return Err(CheckpointError::TrailingData);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::super::cost::residual_neck_plan;
    use super::super::graphs;
    use super::super::PyramidConfig;
    use super::*;
    use crate::tensor::ops;

    fn small_plan() -> Vec<LayerPlan> {
        vec![
            LayerPlan::conv("backbone.stage1", 1, 4, 3, 1, 1, 8, 8),
            LayerPlan::conv("neck.s1.lateral", 4, 4, 1, 1, 0, 4, 4),
            LayerPlan::conv("head.s1", 4, 6, 1, 1, 0, 4, 4),
        ]
    }

    #[test]
    fn initialization_follows_the_plan_exactly() {
        let plan = small_plan();
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(9)).unwrap();
        assert_eq!(store.len(), 3);
        store.check_against_plan(&plan).unwrap();
        let conv = store.get("backbone.stage1").unwrap();
        assert_eq!((conv.c_out(), conv.c_in(), conv.k()), (4, 1, 3));
        assert!(store.get("missing").is_none());
    }

    #[test]
    fn layer_weights_depend_on_the_name_not_the_plan_position() {
        let plan = small_plan();
        let mut reordered = plan.clone();
        reordered.swap(0, 2);
        let a = ParamStore::init_from_plan(&plan, &Rng::seeded(9)).unwrap();
        let b = ParamStore::init_from_plan(&reordered, &Rng::seeded(9)).unwrap();
        assert!(a
            .get("head.s1")
            .unwrap()
            .weight
            .bits_eq(&b.get("head.s1").unwrap().weight));
        // Different names under the same seed draw different weights.
        assert!(!a
            .get("neck.s1.lateral")
            .unwrap()
            .weight
            .bits_eq(&a.get("head.s1").unwrap().weight));
    }

    #[test]
    fn duplicate_layer_names_are_rejected() {
        let mut store = ParamStore::new();
        store
            .insert("head.s1", ConvParams::zeros(1, 1, 1, 1, 0).unwrap())
            .unwrap();
        assert!(matches!(
            store
                .insert("head.s1", ConvParams::zeros(1, 1, 1, 1, 0).unwrap())
                .unwrap_err(),
            PyramidError::DuplicateLayer { .. }
        ));
    }

    #[test]
    fn plan_check_catches_renames_and_geometry_drift() {
        let plan = small_plan();
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(10)).unwrap();

        let mut renamed = plan.clone();
        renamed[1].name = "neck.s1.other".into();
        assert!(matches!(
            store.check_against_plan(&renamed).unwrap_err(),
            PyramidError::UnknownLayer { .. }
        ));

        let mut widened = plan.clone();
        widened[2].c_out = 8;
        assert!(matches!(
            store.check_against_plan(&widened).unwrap_err(),
            PyramidError::WidthMismatch { .. }
        ));

        assert!(matches!(
            store.check_against_plan(&plan[..2]).unwrap_err(),
            PyramidError::WrongLength { .. }
        ));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let cfg = PyramidConfig::standard(2).unwrap();
        let plan = residual_neck_plan(&cfg, 64).unwrap();
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(11)).unwrap();
        let text = write_checkpoint(&store);
        let loaded = read_checkpoint(&text).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert!(p.weight.bits_eq(&q.weight), "{name} weights");
            assert!(p.bias.bits_eq(&q.bias), "{name} bias");
            assert_eq!((p.stride, p.padding), (q.stride, q.padding), "{name}");
        }
        assert_eq!(text, write_checkpoint(&loaded), "save/load/save is stable");
    }

    #[test]
    fn hostile_checkpoints_fail_cleanly() {
        assert_eq!(
            read_checkpoint("not a checkpoint").unwrap_err(),
            CheckpointError::BadMagic
        );
        // A huge declared layer must fail on token counting, not allocation.
        assert!(matches!(
            read_checkpoint("ckpt v1 1\nhead.s1 99999 99999 3 1 1\n1 2 3").unwrap_err(),
            CheckpointError::CountMismatch { .. }
        ));
        assert!(matches!(
            read_checkpoint(&format!("ckpt v1 1\nhead.s1 {0} {0} 3 1 1\n1", usize::MAX))
                .unwrap_err(),
            CheckpointError::Overflow { .. }
        ));
        assert!(matches!(
            read_checkpoint("ckpt v1 1\nhead.s1 1 1 1 1 0\nnan 0").unwrap_err(),
            CheckpointError::NonFinite { .. }
        ));
        assert!(matches!(
            read_checkpoint("ckpt v1 1\nhead.s1 1 1 1 1 0\n1 0 7").unwrap_err(),
            CheckpointError::TrailingData
        ));
        assert!(matches!(
            read_checkpoint("ckpt v1 1\nhead.s1 1 1 5 1 0\n1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 1 0")
                .unwrap_err(),
            CheckpointError::Layer(_)
        ));
        assert!(matches!(
            read_checkpoint("ckpt v1 2\na 1 1 1 1 0\n1 0\na 1 1 1 1 0\n1 0").unwrap_err(),
            CheckpointError::Layer(PyramidError::DuplicateLayer { .. })
        ));
    }

    #[test]
    fn store_bank_builds_the_same_graph_as_direct_ops() {
        let plan = vec![LayerPlan::conv("neck.s1.lateral", 3, 5, 1, 1, 0, 4, 4)];
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(12)).unwrap();
        let mut rng = Rng::seeded(13);
        let mut x = Tensor4::zeros(Shape4::new(2, 3, 4, 4));
        for v in x.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }

        let mut g = Graph::new();
        let mut bank = StoreBank::bind(&mut g, &store);
        let xid = g.leaf(x.clone());
        let out = bank.conv_node(&mut g, "neck.s1.lateral", xid).unwrap();
        let direct = ops::conv2d(&x, store.get("neck.s1.lateral").unwrap()).unwrap();
        assert!(g.value(out).bits_eq(&direct));

        assert!(matches!(
            bank.conv_node(&mut g, "neck.s1.missing", xid).unwrap_err(),
            PyramidError::UnknownLayer { .. }
        ));
    }

    #[test]
    fn gradients_flow_back_to_every_bound_layer() {
        let cfg = PyramidConfig {
            num_scales: 2,
            widths: vec![2, 4],
            strides: vec![2, 4],
            leaky_slope: 0.1,
        };
        let plan = residual_neck_plan(&cfg, 8).unwrap();
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(14)).unwrap();

        let mut g = Graph::new();
        let mut bank = StoreBank::bind(&mut g, &store);
        let mut rng = Rng::seeded(15);
        let taps: Vec<VarId> = cfg
            .widths
            .iter()
            .zip(&cfg.strides)
            .map(|(&w, &s)| {
                let mut t = Tensor4::zeros(Shape4::new(1, w, 8 / s, 8 / s));
                for v in t.data_mut() {
                    *v = rng.uniform(-1.0, 1.0);
                }
                g.leaf(t)
            })
            .collect();
        let (topdown, _) =
            graphs::residual_topdown_graph(&mut g, &mut bank, &taps, 0.1).unwrap();
        // Sum both maps into one root through pooling + concat.
        let pooled = g.maxpool2(topdown[0]).unwrap();
        let root = g.concat_channels(&[pooled, topdown[1]]).unwrap();
        g.backward_ones(root).unwrap();
        for (name, w, b) in bank.bindings() {
            let wg = g.grad(w).unwrap_or_else(|| panic!("{name} weight grad missing"));
            assert!(
                wg.data().iter().any(|&v| v != 0.0),
                "{name} weight grad is all zero"
            );
            assert!(g.grad(b).is_some(), "{name} bias grad missing");
        }
    }
}
