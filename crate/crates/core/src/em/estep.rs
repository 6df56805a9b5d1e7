//! E-step: posterior node weights for every individual, collapsed into the
//! sufficient statistics the M-step consumes.
//!
//! Because quadrature nodes are shared across individuals, most expectations
//! collapse onto per-node totals: the total posterior weight per node and
//! the data-weighted sum per cell per node. Items with covariates need the
//! full posterior weight matrix, which is kept only in that case.

use rayon::prelude::*;

use crate::compensated_sum;
use crate::error::Result;
use crate::model::{ModelSpec, PanelDataset, ParameterSet};
use crate::quad::{normalize_log_weights, BulkEvaluator, QuadratureGrid, CHUNK};

/// Flattened (item, occasion) cell enumeration shared by the E- and M-steps.
#[derive(Debug, Clone)]
pub(crate) struct CellLayout {
    pub cells: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl CellLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut cells = Vec::new();
        let mut offsets = Vec::with_capacity(spec.n_items());
        for (j, item) in spec.items.iter().enumerate() {
            offsets.push(cells.len());
            for t in 0..item.occasions {
                cells.push((j, t));
            }
        }
        CellLayout { cells, offsets }
    }

    #[inline]
    pub fn index(&self, item: usize, occasion: usize) -> usize {
        self.offsets[item] + occasion
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }
}

/// Collapsed posterior statistics for one E-step.
pub(crate) struct EStepStats {
    /// Marginal log-likelihood at the parameters the stats were computed at.
    pub loglik: f64,
    /// Per node: total posterior weight over individuals.
    pub w_plus: Vec<f64>,
    /// Per cell (cell-major), per node: sum_i wtilde_ig y_i.
    pub sy: Vec<f64>,
    /// Full posterior weight matrix (n x G, row-major); present only when
    /// the model uses covariates.
    pub wtilde: Option<Vec<f64>>,
    pub n: usize,
}

struct ChunkStats {
    w_plus: Vec<f64>,
    sy: Vec<f64>,
    lls: Vec<f64>,
}

pub(crate) fn e_step(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    layout: &CellLayout,
) -> Result<EStepStats> {
    let eval = BulkEvaluator::new(data, spec, params, grid)?;
    let n = data.n();
    let n_nodes = grid.n_nodes();
    let n_cells = layout.len();
    let keep_wtilde = data.has_covariates();

    let process = |chunk_start: usize,
                   chunk_len: usize,
                   mut wslice: Option<&mut [f64]>|
     -> Result<ChunkStats> {
        let mut local = ChunkStats {
            w_plus: vec![0.0; n_nodes],
            sy: vec![0.0; n_cells * n_nodes],
            lls: Vec::with_capacity(chunk_len),
        };
        let mut buf = vec![0.0; n_nodes];
        for k in 0..chunk_len {
            let i = chunk_start + k;
            eval.fill_log_posterior(i, &mut buf);
            let lm = normalize_log_weights(&mut buf)?;
            local.lls.push(lm + eval.const_term(i));
            for (acc, &w) in local.w_plus.iter_mut().zip(buf.iter()) {
                *acc += w;
            }
            for (c, &(item, t)) in layout.cells.iter().enumerate() {
                let y = data.value(i, item, t);
                let col = &mut local.sy[c * n_nodes..(c + 1) * n_nodes];
                for (acc, &w) in col.iter_mut().zip(buf.iter()) {
                    *acc += y * w;
                }
            }
            if let Some(w) = wslice.as_deref_mut() {
                w[k * n_nodes..(k + 1) * n_nodes].copy_from_slice(&buf);
            }
        }
        Ok(local)
    };

    let n_chunks = n.div_ceil(CHUNK);
    let (chunks, wtilde): (Vec<Result<ChunkStats>>, Option<Vec<f64>>) = if keep_wtilde {
        let mut wtilde = vec![0.0; n * n_nodes];
        let chunks = wtilde
            .par_chunks_mut(CHUNK * n_nodes)
            .enumerate()
            .map(|(ci, wslice)| {
                let start = ci * CHUNK;
                let len = (n - start).min(CHUNK);
                process(start, len, Some(wslice))
            })
            .collect();
        (chunks, Some(wtilde))
    } else {
        let chunks = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let start = ci * CHUNK;
                let len = (n - start).min(CHUNK);
                process(start, len, None)
            })
            .collect();
        (chunks, None)
    };

    let mut w_plus = vec![0.0; n_nodes];
    let mut sy = vec![0.0; n_cells * n_nodes];
    let mut lls = Vec::with_capacity(n);
    for chunk in chunks {
        let chunk = chunk?;
        for (acc, v) in w_plus.iter_mut().zip(chunk.w_plus) {
            *acc += v;
        }
        for (acc, v) in sy.iter_mut().zip(chunk.sy) {
            *acc += v;
        }
        lls.extend(chunk.lls);
    }
    Ok(EStepStats {
        loglik: compensated_sum(lls),
        w_plus,
        sy,
        wtilde,
        n,
    })
}
