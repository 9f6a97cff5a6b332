//! U-shaped DISCO network: per level two (disco -> channel mix -> relu)
//! blocks, 2x average-pool encoder, nearest-neighbor upsampling decoder with
//! additive skip connections, and a pointwise channel projection head.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamTree, Tape};
use crate::disco::{DiscoTable, GridSpec, KernelBasis};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

use super::UdnoConfig;

/// Binds a parameter tree onto a tape once, so every operator lookup shares
/// the same leaf nodes (and gradient accumulation stays per-leaf).
pub struct ParamBinder {
    nodes: HashMap<String, NodeId>,
}

impl ParamBinder {
    pub fn bind(tape: &mut Tape, params: &ParamTree) -> Self {
        let mut nodes = HashMap::new();
        for (name, values) in params.iter() {
            let t = Tensor::from_data(1, 1, values.len(), values.to_vec())
                .expect("flat leaf tensor");
            nodes.insert(name.to_string(), tape.param(name, t));
        }
        Self { nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter leaf {name}")))
    }

    /// Rebinds one leaf to a transformed tensor (used by the fixed-pixel
    /// ablation, which rescales coefficients instead of re-discretizing).
    pub fn override_leaf(&mut self, tape: &mut Tape, name: &str, tensor: Tensor) {
        self.nodes.insert(name.to_string(), tape.constant(tensor));
    }
}

struct LevelTables {
    grid: GridSpec,
    table: Arc<DiscoTable>,
}

/// A UDNO instantiated for one concrete base grid: the function-space
/// parameters stay grid-free, this struct only carries the per-level
/// discretization tables.
pub struct UdnoNet {
    cfg: UdnoConfig,
    basis: KernelBasis,
    prefix: String,
    levels: Vec<LevelTables>,
}

/// Keyed cache so spatial/frequency branches and all cascades share tables
/// for identical (grid, padding, basis) triples.
#[derive(Default)]
pub struct TableCache {
    map: HashMap<(usize, usize, u8, u64, usize, usize), Arc<DiscoTable>>,
}

impl TableCache {
    fn get(
        &mut self,
        basis: &KernelBasis,
        grid: GridSpec,
        pad: crate::disco::PadSpec,
    ) -> Result<Arc<DiscoTable>> {
        let cfg = basis.config();
        let pad_tag = match (pad.row, pad.col) {
            (crate::disco::PadKind::Zero, crate::disco::PadKind::Zero) => 0u8,
            (crate::disco::PadKind::FlippedCircular, crate::disco::PadKind::Reflect) => 1,
            (crate::disco::PadKind::Zero, crate::disco::PadKind::Reflect) => 2,
            _ => 3,
        };
        let key =
            (grid.rows, grid.cols, pad_tag, cfg.cutoff.to_bits(), cfg.rings, cfg.per_ring);
        if let Some(t) = self.map.get(&key) {
            return Ok(t.clone());
        }
        let table = Arc::new(DiscoTable::build(basis, grid, grid, pad)?);
        self.map.insert(key, table.clone());
        Ok(table)
    }
}

impl UdnoNet {
    /// Builds the per-level tables for a base grid of `rows x cols`.
    pub fn new(
        cfg: &UdnoConfig,
        prefix: impl Into<String>,
        rows: usize,
        cols: usize,
        cache: &mut TableCache,
    ) -> Result<Self> {
        cfg.validate()?;
        let div = 1usize << cfg.levels;
        if rows % div != 0 || cols % div != 0 {
            return Err(invalid(format!(
                "udno grid {rows}x{cols} not divisible by 2^levels = {div}"
            )));
        }
        let basis = KernelBasis::new(cfg.basis_config())?;
        let pad = cfg.pad.pad_spec();
        let mut levels = Vec::new();
        for l in 0..=cfg.levels {
            let grid = GridSpec::new(rows >> l, cols >> l);
            levels.push(LevelTables { grid, table: cache.get(&basis, grid, pad)? });
        }
        Ok(Self { cfg: cfg.clone(), basis, prefix: prefix.into(), levels })
    }

    pub fn config(&self) -> &UdnoConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn basis(&self) -> &KernelBasis {
        &self.basis
    }

    /// Table discretized for level `l` of this net's grid.
    pub fn level_table(&self, l: usize) -> &Arc<DiscoTable> {
        &self.levels[l].table
    }

    fn block_names(&self) -> Vec<(String, usize, usize, usize)> {
        // (name, level, in_ch, hidden) for every disco/mix block.
        let c = self.cfg.hidden;
        let mut blocks = Vec::new();
        for l in 0..self.cfg.levels {
            let in0 = if l == 0 { self.cfg.in_channels } else { c };
            blocks.push((format!("{}.enc{l}.b0", self.prefix), l, in0, c));
            blocks.push((format!("{}.enc{l}.b1", self.prefix), l, c, c));
        }
        let lm = self.cfg.levels;
        blocks.push((format!("{}.mid.b0", self.prefix), lm, c, c));
        blocks.push((format!("{}.mid.b1", self.prefix), lm, c, c));
        for l in (0..self.cfg.levels).rev() {
            blocks.push((format!("{}.dec{l}.b0", self.prefix), l, c, c));
            blocks.push((format!("{}.dec{l}.b1", self.prefix), l, c, c));
        }
        blocks
    }

    /// Inserts freshly initialized parameter leaves for this net.
    ///
    /// DISCO coefficients are uniform with a scale normalized by the basis
    /// quadrature masses on the level grid, so layer outputs start at unit
    /// order regardless of resolution; mix weights follow the usual
    /// fan-in rule.
    pub fn init_params(&self, params: &mut ParamTree, rng: &mut ChaCha8Rng) -> Result<()> {
        let l = self.basis.len();
        for (name, level, in_ch, out_ch) in self.block_names() {
            let masses = self.levels[level].table.basis_masses();
            let mass_norm: f64 = masses.iter().map(|m| m * m).sum::<f64>().sqrt().max(1e-12);
            let scale = (2.0f64).sqrt() / ((in_ch as f64).sqrt() * mass_norm);
            let coeffs: Vec<f64> =
                (0..out_ch * in_ch * l).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
            params.insert(format!("{name}.disco"), coeffs)?;
            let wscale = (3.0 / out_ch as f64).sqrt();
            let w: Vec<f64> = (0..out_ch * out_ch)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * wscale)
                .collect();
            params.insert(format!("{name}.mix_w"), w)?;
            params.insert(format!("{name}.mix_b"), vec![0.0; out_ch])?;
        }
        let hscale = (3.0 / self.cfg.hidden as f64).sqrt();
        let head: Vec<f64> = (0..self.cfg.out_channels * self.cfg.hidden)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * hscale)
            .collect();
        params.insert(format!("{}.head_w", self.prefix), head)?;
        params.insert(format!("{}.head_b", self.prefix), vec![0.0; self.cfg.out_channels])?;
        Ok(())
    }

    /// Ties reflection-paired angular slots in every DISCO leaf of this net,
    /// making the whole operator symmetric under detector-axis reversal.
    pub fn symmetrize_kernels(&self, params: &mut ParamTree) -> Result<()> {
        let basis = &self.basis;
        let pairs = basis.reflection_pairs();
        let l = basis.len();
        for (name, _, in_ch, out_ch) in self.block_names() {
            let leaf = params
                .get_mut(&format!("{name}.disco"))
                .ok_or_else(|| invalid(format!("missing leaf {name}.disco")))?;
            debug_assert_eq!(leaf.len(), in_ch * out_ch * l);
            for chunk in leaf.chunks_exact_mut(l) {
                for ring in 1..=basis.config().rings {
                    for &(a, b) in &pairs {
                        let ia = basis.index_of(ring, a);
                        let ib = basis.index_of(ring, b);
                        let mean = 0.5 * (chunk[ia] + chunk[ib]);
                        chunk[ia] = mean;
                        chunk[ib] = mean;
                    }
                }
            }
        }
        Ok(())
    }

    fn disco_mix_relu(
        &self,
        tape: &mut Tape,
        binder: &ParamBinder,
        x: NodeId,
        name: &str,
        level: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<NodeId> {
        let coeffs = binder.get(&format!("{name}.disco"))?;
        let w = binder.get(&format!("{name}.mix_w"))?;
        let b = binder.get(&format!("{name}.mix_b"))?;
        let d = tape.disco_apply(
            x,
            coeffs,
            self.levels[level].table.clone(),
            self.basis.clone(),
            in_ch,
            out_ch,
        )?;
        // channel_mix expects the weight node shaped (1, out, in).
        let w_shaped = reshape_matrix(tape, w, out_ch, out_ch)?;
        let m = tape.channel_mix(d, w_shaped, b)?;
        Ok(tape.relu(m))
    }

    /// Records the forward pass onto `tape`.
    pub fn forward(&self, tape: &mut Tape, binder: &ParamBinder, input: NodeId) -> Result<NodeId> {
        let v = tape.value(input);
        if v.channels != self.cfg.in_channels
            || v.rows != self.levels[0].grid.rows
            || v.cols != self.levels[0].grid.cols
        {
            return Err(invalid(format!(
                "udno {} input {}x{}x{} does not match {}x{}x{}",
                self.prefix,
                v.channels,
                v.rows,
                v.cols,
                self.cfg.in_channels,
                self.levels[0].grid.rows,
                self.levels[0].grid.cols
            )));
        }
        let c = self.cfg.hidden;
        let mut x = input;
        let mut skips = Vec::new();
        for l in 0..self.cfg.levels {
            let in0 = if l == 0 { self.cfg.in_channels } else { c };
            x = self.disco_mix_relu(tape, binder, x, &format!("{}.enc{l}.b0", self.prefix), l, in0, c)?;
            x = self.disco_mix_relu(tape, binder, x, &format!("{}.enc{l}.b1", self.prefix), l, c, c)?;
            skips.push(x);
            x = tape.downsample2(x)?;
        }
        let lm = self.cfg.levels;
        x = self.disco_mix_relu(tape, binder, x, &format!("{}.mid.b0", self.prefix), lm, c, c)?;
        x = self.disco_mix_relu(tape, binder, x, &format!("{}.mid.b1", self.prefix), lm, c, c)?;
        for l in (0..self.cfg.levels).rev() {
            x = tape.upsample2(x);
            x = tape.add(x, skips[l])?;
            x = self.disco_mix_relu(tape, binder, x, &format!("{}.dec{l}.b0", self.prefix), l, c, c)?;
            x = self.disco_mix_relu(tape, binder, x, &format!("{}.dec{l}.b1", self.prefix), l, c, c)?;
        }
        let head_w = binder.get(&format!("{}.head_w", self.prefix))?;
        let head_b = binder.get(&format!("{}.head_b", self.prefix))?;
        let w_shaped = reshape_matrix(tape, head_w, self.cfg.out_channels, c)?;
        tape.channel_mix(x, w_shaped, head_b)
    }
}

/// Views a flat leaf node as an `(1, rows, cols)` matrix for channel mixing.
/// Shapes on the tape are metadata only, so this is a zero-cost reshape
/// through an add-with-zeros; gradients flow straight through.
fn reshape_matrix(tape: &mut Tape, flat: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
    let v = tape.value(flat);
    if v.len() != rows * cols {
        return Err(invalid("matrix leaf has wrong element count"));
    }
    tape.reshape(flat, 1, rows, cols)
}
