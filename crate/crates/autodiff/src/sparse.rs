//! Fixed sparse linear maps between flattened tensors.
//!
//! Padding, cropping, window extraction, im2col, pooling and interpolation
//! are all linear in the input, so each is a [`SparseMap`]. The adjoint of a
//! map is its transpose, which gives exact gradients of any order.

use std::cell::OnceCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::var::Tensor;

/// Row-compressed matrix taking a tensor of `in_shape` to one of `out_shape`.
pub struct SparseMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    transposed: OnceCell<Rc<SparseMap>>,
}

impl SparseMap {
    /// Builds a map row by row: `row(i, entries)` pushes `(input index, weight)`
    /// pairs for flat output index `i`. Empty rows produce zeros.
    pub fn from_rows(
        in_shape: &[usize],
        out_shape: &[usize],
        mut row: impl FnMut(usize, &mut Vec<(usize, f64)>),
    ) -> Self {
        let n_out: usize = out_shape.iter().product();
        let n_in: usize = in_shape.iter().product();
        assert!(n_in <= u32::MAX as usize, "sparse map input too large");
        let mut indptr = Vec::with_capacity(n_out + 1);
        let mut indices = Vec::with_capacity(n_out);
        let mut weights = Vec::with_capacity(n_out);
        let mut scratch = Vec::new();
        indptr.push(0);
        for i in 0..n_out {
            scratch.clear();
            row(i, &mut scratch);
            for &(j, w) in &scratch {
                debug_assert!(j < n_in);
                indices.push(j as u32);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        SparseMap {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            indptr,
            indices,
            weights,
            transposed: OnceCell::new(),
        }
    }

    /// A pure selection map: each output reads one input or is zero.
    pub fn gather(
        in_shape: &[usize],
        out_shape: &[usize],
        mut source: impl FnMut(usize) -> Option<usize>,
    ) -> Self {
        Self::from_rows(in_shape, out_shape, |i, row| {
            if let Some(j) = source(i) {
                row.push((j, 1.0));
            }
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.shape(),
            &self.in_shape[..],
            "sparse map expects input of shape {:?}",
            self.in_shape
        );
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let n_out = self.indptr.len() - 1;
        let mut out = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let (a, b) = (self.indptr[i], self.indptr[i + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.weights[k] * src[self.indices[k] as usize];
            }
            out.push(acc);
        }
        ArrayD::from_shape_vec(IxDyn(&self.out_shape), out).expect("shape")
    }

    /// The adjoint map, built once and cached.
    pub fn transpose(&self) -> Rc<SparseMap> {
        self.transposed
            .get_or_init(|| {
                let n_in: usize = self.in_shape.iter().product();
                let n_out = self.indptr.len() - 1;
                let mut counts = vec![0usize; n_in + 1];
                for &j in &self.indices {
                    counts[j as usize + 1] += 1;
                }
                for j in 0..n_in {
                    counts[j + 1] += counts[j];
                }
                let indptr = counts.clone();
                let mut fill = counts;
                let mut indices = vec![0u32; self.indices.len()];
                let mut weights = vec![0.0; self.indices.len()];
                for i in 0..n_out {
                    for k in self.indptr[i]..self.indptr[i + 1] {
                        let j = self.indices[k] as usize;
                        let slot = fill[j];
                        indices[slot] = i as u32;
                        weights[slot] = self.weights[k];
                        fill[j] += 1;
                    }
                }
                Rc::new(SparseMap {
                    in_shape: self.out_shape.clone(),
                    out_shape: self.in_shape.clone(),
                    indptr,
                    indices,
                    weights,
                    transposed: OnceCell::new(),
                })
            })
            .clone()
    }
}
