use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};

/// Per-token embeddings of one query or document. Row 0 is the CLS view;
/// rows flagged invalid are padding and are skipped by every scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMatrix {
    pub owner_id: String,
    rows: Tensor,
    valid: Vec<bool>,
}

impl ViewMatrix {
    pub fn new(owner_id: impl Into<String>, rows: Tensor, valid: Vec<bool>) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::Contract(format!(
                "view matrix needs rank-2 rows, got {:?}",
                rows.shape()
            )));
        }
        if valid.len() != rows.rows() {
            return Err(Error::shape(
                "view matrix mask",
                rows.shape(),
                &[valid.len()],
            ));
        }
        if !rows.all_finite() {
            return Err(Error::Contract("view matrix has non-finite values".into()));
        }
        Ok(ViewMatrix {
            owner_id: owner_id.into(),
            rows,
            valid,
        })
    }

    /// All rows valid.
    pub fn dense(owner_id: impl Into<String>, rows: Tensor) -> Result<Self> {
        let n = if rows.rank() == 2 { rows.rows() } else { 0 };
        Self::new(owner_id, rows, vec![true; n])
    }

    pub fn from_rows(owner_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        Self::dense(owner_id, Tensor::from_rows(rows)?)
    }

    pub fn views(&self) -> usize {
        self.rows.rows()
    }

    pub fn dims(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Indices and rows of the non-padding views.
    pub fn valid_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        (0..self.views())
            .filter(|&i| self.valid[i])
            .map(|i| (i, self.rows.row(i)))
    }

    pub fn cls_view(&self) -> &[f64] {
        self.rows.row(0)
    }

    /// Appends zero padding rows up to `views` total.
    pub fn padded_to(&self, views: usize) -> ViewMatrix {
        if views <= self.views() {
            return self.clone();
        }
        let d = self.dims();
        let mut data = self.rows.data().to_vec();
        data.resize(views * d, 0.0);
        let mut valid = self.valid.clone();
        valid.resize(views, false);
        ViewMatrix {
            owner_id: self.owner_id.clone(),
            rows: Tensor::matrix(views, d, data).expect("sized"),
            valid,
        }
    }

    /// The same matrix with only `view` left valid.
    pub fn restricted_to(&self, view: usize) -> Result<ViewMatrix> {
        if view >= self.views() || !self.valid[view] {
            return Err(Error::Contract(format!(
                "view {view} is not a valid view of {:?}",
                self.owner_id
            )));
        }
        let mut valid = vec![false; self.views()];
        valid[view] = true;
        Ok(ViewMatrix {
            owner_id: self.owner_id.clone(),
            rows: self.rows.clone(),
            valid,
        })
    }

    /// Reorders views; `order[k]` is the source index of new row `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<ViewMatrix> {
        if order.len() != self.views() {
            return Err(Error::shape(
                "permute views",
                &[self.views()],
                &[order.len()],
            ));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.row(i).to_vec()).collect();
        let valid = order.iter().map(|&i| self.valid[i]).collect();
        ViewMatrix::new(self.owner_id.clone(), Tensor::from_rows(&rows)?, valid)
    }

    /// Max deviation of a valid row's L2 norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.valid_rows()
            .map(|(_, r)| (l2_norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
