use serde::{Deserialize, Serialize};

use super::WeightMask;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct CsrMatrix<F> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<F>,
}

/// One maskable layer in the CSR export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct CsrLayer<F> {
    pub layer_name: String,
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Scalar> CsrMatrix<F> {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Format { offset: 0, message: m.to_string() });
        if self.row_ptr.len() != self.n_rows + 1 || self.row_ptr.first() != Some(&0) {
            return bad("row_ptr must have n_rows + 1 entries starting at 0");
        }
        if self.row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_ptr is not nondecreasing");
        }
        if self.row_ptr[self.n_rows] != self.values.len() || self.col_idx.len() != self.values.len() {
            return bad("row_ptr[last], col_idx and values disagree on nnz");
        }
        for r in 0..self.n_rows {
            let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= self.n_cols) {
                return bad("column indices must be strictly increasing and in range");
            }
        }
        Ok(())
    }

    /// Dense `[n_rows, n_cols]` reconstruction with zeros off the pattern.
    pub fn to_dense(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        let data = t.data_mut();
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                data[r * self.n_cols + self.col_idx[k]] = self.values[k];
            }
        }
        t
    }

    /// Bytes needed for values plus both index arrays, at `value_bytes` per
    /// value and `index_bytes` per index.
    pub fn storage_bytes(&self, value_bytes: usize, index_bytes: usize) -> usize {
        self.values.len() * value_bytes + (self.row_ptr.len() + self.col_idx.len()) * index_bytes
    }
}

/// CSR view of `weights` (treated as `[shape[0], rest]`) holding exactly the
/// positions active in `bits`, in row-major order.
pub fn to_csr<F: Scalar>(weights: &Tensor<F>, bits: &[bool]) -> Result<CsrMatrix<F>> {
    if bits.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "mask of {} bits for {} weights",
            bits.len(),
            weights.len()
        )));
    }
    let n_rows = weights.rows();
    let n_cols = weights.row_len();
    let mut row_ptr = Vec::with_capacity(n_rows + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for r in 0..n_rows {
        for c in 0..n_cols {
            let i = r * n_cols + c;
            if bits[i] {
                col_idx.push(c);
                values.push(weights.data()[i]);
            }
        }
        row_ptr.push(values.len());
    }
    Ok(CsrMatrix {
        n_rows,
        n_cols,
        row_ptr,
        col_idx,
        values,
    })
}

/// CSR export of every maskable layer of `model` under `mask`.
pub fn export_csr<F: Scalar>(model: &Model<F>, mask: &WeightMask) -> Result<Vec<CsrLayer<F>>> {
    mask.check_model(model)?;
    let names = maskable_layer_names(model);
    model
        .maskable_weights()
        .zip(mask.layers())
        .zip(names)
        .map(|((w, bits), layer_name)| {
            let m = to_csr(w, bits)?;
            Ok(CsrLayer {
                layer_name,
                n_rows: m.n_rows,
                n_cols: m.n_cols,
                row_ptr: m.row_ptr,
                col_idx: m.col_idx,
                values: m.values,
            })
        })
        .collect()
}

/// Writes exported CSR layers back into the maskable weights of `model`;
/// positions off the sparsity pattern become zero.
pub fn import_csr<F: Scalar>(model: &mut Model<F>, layers: &[CsrLayer<F>]) -> Result<()> {
    let shapes = model.maskable_shapes();
    if shapes.len() != layers.len() {
        return Err(Error::Dimension(format!(
            "{} CSR layers for {} maskable layers",
            layers.len(),
            shapes.len()
        )));
    }
    for (w, l) in model.maskable_weights_mut().zip(layers) {
        let m = CsrMatrix {
            n_rows: l.n_rows,
            n_cols: l.n_cols,
            row_ptr: l.row_ptr.clone(),
            col_idx: l.col_idx.clone(),
            values: l.values.clone(),
        };
        m.validate()?;
        if m.n_rows != w.rows() || m.n_cols != w.row_len() {
            return Err(Error::Dimension(format!(
                "CSR layer {} is {}x{}, weight is {:?}",
                l.layer_name,
                m.n_rows,
                m.n_cols,
                w.shape()
            )));
        }
        w.data_mut().copy_from_slice(m.to_dense().data());
    }
    Ok(())
}

fn maskable_layer_names<F: Scalar>(model: &Model<F>) -> Vec<String> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_maskable())
        .map(|(i, l)| format!("{}.{i}", l.name()))
        .collect()
}
