//! Temporal style head: `s_t = fc2(lrelu(fc1([v_t, w0])))`, and one affine per
//! encoder modulation site turning `s_t` into a channelwise `(γ, β)` with
//! `γ = 1 + raw`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleConfig {
    pub code_dim: usize,
    pub w_dim: usize,
    pub style_dim: usize,
    /// Channel count of every modulation site, in encoder order.
    pub site_channels: Vec<usize>,
}

/// A temporal style vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalStyle<T> {
    pub values: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct StyleHead {
    pub config: StyleConfig,
}

impl StyleHead {
    pub fn new(config: StyleConfig) -> Result<Self> {
        if config.code_dim == 0 || config.w_dim == 0 || config.style_dim == 0 {
            return Err(Error::Config("style head dimensions must be positive".into()));
        }
        Ok(Self { config })
    }

    pub fn sites(&self) -> usize {
        self.config.site_channels.len()
    }

    /// Site affines start at zero, so fresh heads modulate with `γ = 1, β = 0`.
    pub fn add_params<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let c = &self.config;
        nn::add_dense(store, init, "style.fc1", c.code_dim + c.w_dim, c.style_dim, 1.0, 0.0);
        nn::add_dense(store, init, "style.fc2", c.style_dim, c.style_dim, 1.0, 0.0);
        for (i, &ch) in c.site_channels.iter().enumerate() {
            for part in ["gamma", "beta"] {
                store.insert(format!("style.site{i}.{part}.weight"), Tensor::zeros(&[ch, c.style_dim]));
                store.insert(format!("style.site{i}.{part}.bias"), Tensor::zeros(&[ch]));
            }
        }
    }

    /// `v: [B, code_dim]`, `w0: [B, w_dim]` → `[B, style_dim]`.
    pub fn fuse_graph<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, v: Var, w0: Var) -> Result<Var> {
        let c = &self.config;
        let (vs, ws) = (g.shape(v).to_vec(), g.shape(w0).to_vec());
        if vs.len() != 2 || ws.len() != 2 || vs[0] != ws[0] || vs[1] != c.code_dim || ws[1] != c.w_dim {
            return Err(Error::Shape(format!(
                "fuse expects [B, {}] and [B, {}], got {vs:?} and {ws:?}",
                c.code_dim, c.w_dim
            )));
        }
        let x = g.concat(&[v, w0], 1)?;
        let h = nn::dense(g, b, "style.fc1", x, 1.0)?;
        let h = nn::lrelu(g, h);
        nn::dense(g, b, "style.fc2", h, 1.0)
    }

    /// `(γ, β)`, each `[B, channels(site)]`.
    pub fn site_graph<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, s: Var, site: usize) -> Result<(Var, Var)> {
        if site >= self.sites() {
            return Err(Error::InvalidArgument(format!("site {site} of {}", self.sites())));
        }
        let raw = nn::dense(g, b, &format!("style.site{site}.gamma"), s, 1.0)?;
        let gamma = g.affine(raw, T::one(), T::one());
        let beta = nn::dense(g, b, &format!("style.site{site}.beta"), s, 1.0)?;
        Ok((gamma, beta))
    }

    pub fn fuse<T: Scalar>(&self, params: &ParamStore<T>, v: &[T], w0: &[T]) -> Result<TemporalStyle<T>> {
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let vv = g.constant(Tensor::new(&[1, v.len()], v.to_vec())?);
        let wv = g.constant(Tensor::new(&[1, w0.len()], w0.to_vec())?);
        let s = self.fuse_graph(&mut g, &b, vv, wv)?;
        Ok(TemporalStyle { values: g.value(s).data().to_vec() })
    }

    pub fn site_params<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        s: &TemporalStyle<T>,
        site: usize,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if s.values.len() != self.config.style_dim {
            return Err(Error::Shape(format!("style of length {} vs {}", s.values.len(), self.config.style_dim)));
        }
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let sv = g.constant(Tensor::new(&[1, s.values.len()], s.values.clone())?);
        let (gm, bt) = self.site_graph(&mut g, &b, sv, site)?;
        Ok((g.value(gm).data().to_vec(), g.value(bt).data().to_vec()))
    }
}
