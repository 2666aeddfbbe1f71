//! The toy networks: image and event encoders, the attribute encoder, the
//! pseudo-flow decoder, the refinement block, the task head and the two
//! patch discriminators.
//!
//! Every network is a function of a [`Graph`] and a parameter binding, so
//! the same weights can be bound trainable in one step and frozen in the
//! next.

use crate::config::PipelineConfig;
use crate::error::Result;
use evbridge_autodiff::{Graph, ParamStore, Var};
use rand::Rng;

pub const LEAK: f64 = 0.2;
const K: usize = 3;

/// Parameters of one store, bound either as trainable leaves or as
/// constants.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    fn p(&self, g: &Graph, name: &str) -> Result<Var> {
        if self.trainable {
            Ok(g.param(self.store, name)?)
        } else {
            let t = self.store.get(name).ok_or_else(|| {
                evbridge_autodiff::Error::Usage(format!("unknown parameter '{name}'"))
            })?;
            Ok(g.constant(t.clone()))
        }
    }

    fn conv(&self, g: &Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        Ok(g.add_bias(g.conv2d(x, w, stride)?, b)?)
    }

    fn linear(&self, g: &Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        Ok(g.add_bias(g.matmul(x, w)?, b)?)
    }
}

fn add_conv(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    s.insert_uniform(
        &format!("{name}.w"),
        &[c_out, c_in, K, K],
        c_in * K * K,
        rng,
    )?;
    s.insert_zeros(&format!("{name}.b"), &[c_out])?;
    Ok(())
}

fn add_linear(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    n_in: usize,
    n_out: usize,
) -> Result<()> {
    s.insert_uniform(&format!("{name}.w"), &[n_in, n_out], n_in, rng)?;
    s.insert_zeros(&format!("{name}.b"), &[n_out])?;
    Ok(())
}

fn head_features(cfg: &PipelineConfig) -> usize {
    let side = cfg.image_size / 8;
    cfg.z_channels * side * side
}

/// Encoders, decoder, refinement block and task head.
pub fn init_generator(cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let (h, z, zeta) = (cfg.hidden_channels, cfg.z_channels, cfg.zeta_dim);
    let mut s = ParamStore::new();
    for (enc, c_in) in [("e_img", 1), ("e_evt", 2)] {
        add_conv(&mut s, rng, &format!("{enc}.c1"), c_in, h)?;
        add_conv(&mut s, rng, &format!("{enc}.c2"), h, 2 * h)?;
        add_conv(&mut s, rng, &format!("{enc}.c3"), 2 * h, z)?;
    }
    if cfg.split_enabled {
        add_conv(&mut s, rng, "e_attr.c1", 2, h)?;
        add_conv(&mut s, rng, "e_attr.c2", h, h)?;
        add_linear(&mut s, rng, "e_attr.fc", h, zeta)?;
    }
    let dec_in = z + if cfg.split_enabled { zeta } else { 0 };
    add_conv(&mut s, rng, "dec.c1", dec_in, 2 * h)?;
    add_conv(&mut s, rng, "dec.c2", 2 * h, h)?;
    add_conv(&mut s, rng, "dec.c3", h, 2)?;
    add_conv(&mut s, rng, "ref.c1", 3 + cfg.noise_channels, h)?;
    add_conv(&mut s, rng, "ref.c2", h, h)?;
    add_conv(&mut s, rng, "ref.c3", h, 2)?;
    add_conv(&mut s, rng, "head.c1", z, z)?;
    add_linear(&mut s, rng, "head.fc", head_features(cfg), cfg.num_classes)?;
    Ok(s)
}

/// Latent and event discriminators.
pub fn init_discriminator(cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let (h, z) = (cfg.hidden_channels, cfg.z_channels);
    let mut s = ParamStore::new();
    add_conv(&mut s, rng, "f_lat.c1", z, z)?;
    add_conv(&mut s, rng, "f_lat.c2", z, z)?;
    add_conv(&mut s, rng, "f_lat.c3", z, 1)?;
    add_conv(&mut s, rng, "f_evt.c1", 2, h)?;
    add_conv(&mut s, rng, "f_evt.c2", h, 2 * h)?;
    add_conv(&mut s, rng, "f_evt.c3", 2 * h, 1)?;
    Ok(s)
}

fn encoder(g: &Graph, b: Bind, name: &str, x: Var) -> Result<Var> {
    let h = g.leaky_relu(b.conv(g, &format!("{name}.c1"), x, 1)?, LEAK);
    let h = g.leaky_relu(b.conv(g, &format!("{name}.c2"), h, 2)?, LEAK);
    b.conv(g, &format!("{name}.c3"), h, 2)
}

/// `[B, 1, S, S]` intensities to shared features `[B, C_z, S/4, S/4]`.
pub fn encode_image(g: &Graph, b: Bind, img: Var) -> Result<Var> {
    encoder(g, b, "e_img", img)
}

/// `[B, 2, S, S]` scaled histograms to shared features.
pub fn encode_event(g: &Graph, b: Bind, events: Var) -> Result<Var> {
    encoder(g, b, "e_evt", events)
}

/// `[B, 2, S, S]` scaled histograms to event-specific features `[B, C_ζ]`.
pub fn encode_attr(g: &Graph, b: Bind, events: Var) -> Result<Var> {
    let h = g.leaky_relu(b.conv(g, "e_attr.c1", events, 2)?, LEAK);
    let h = g.leaky_relu(b.conv(g, "e_attr.c2", h, 2)?, LEAK);
    b.linear(g, "e_attr.fc", g.global_avg_pool(h)?)
}

/// Shared features (and, with the split, event-specific features
/// broadcast over space) to a bounded 2-channel map at input resolution.
pub fn decode(g: &Graph, b: Bind, cfg: &PipelineConfig, z: Var, zeta: Option<Var>) -> Result<Var> {
    let input = match zeta {
        Some(zeta) => {
            let s = g.shape(z);
            let zb = g.broadcast_spatial(zeta, s[2], s[3])?;
            g.concat_channels(&[z, zb])?
        }
        None => z,
    };
    let h = g.relu(b.conv(g, "dec.c1", g.upsample_nearest2(input)?, 1)?);
    let h = g.relu(b.conv(g, "dec.c2", g.upsample_nearest2(h)?, 1)?);
    let out = b.conv(g, "dec.c3", h, 1)?;
    Ok(g.scale(g.tanh(out), cfg.flow_scale))
}

/// Model-based histogram `[pos, neg]` from the pseudo-flow counts
/// `⟨∇Ĩ, v̂⟩`; `grad` holds `[B, 2, S, S]` log-intensity gradients.
pub fn initial_guess(g: &Graph, flow: Var, grad: Var) -> Result<Var> {
    let prod = g.mul(flow, grad)?;
    let n = g.add(g.slice_channels(prod, 0, 1)?, g.slice_channels(prod, 1, 1)?)?;
    Ok(g.concat_channels(&[g.relu(n), g.relu(g.neg(n))])?)
}

/// Rectified sum of the initial guess and a three-layer residual computed
/// from the guess, the image and noise maps. Counts stay in event units.
pub fn refine(
    g: &Graph,
    b: Bind,
    cfg: &PipelineConfig,
    init: Var,
    img: Var,
    noise: Var,
) -> Result<Var> {
    let x = g.concat_channels(&[g.scale(init, cfg.event_input_scale), img, noise])?;
    let h = g.relu(b.conv(g, "ref.c1", x, 1)?);
    let h = g.relu(b.conv(g, "ref.c2", h, 1)?);
    let residual = b.conv(g, "ref.c3", h, 1)?;
    Ok(g.relu(g.add(init, residual)?))
}

/// Class logits from shared features of either domain.
pub fn task_head(g: &Graph, b: Bind, cfg: &PipelineConfig, z: Var) -> Result<Var> {
    let h = g.relu(b.conv(g, "head.c1", z, 1)?);
    let h = g.avg_pool2d(h)?;
    let batch = g.shape(h)[0];
    let flat = g.reshape(h, &[batch, head_features(cfg)])?;
    b.linear(g, "head.fc", flat)
}

/// Patch scores on shared features.
pub fn disc_latent(g: &Graph, b: Bind, z: Var) -> Result<Var> {
    let h = g.leaky_relu(b.conv(g, "f_lat.c1", z, 1)?, LEAK);
    let h = g.leaky_relu(b.conv(g, "f_lat.c2", h, 2)?, LEAK);
    b.conv(g, "f_lat.c3", h, 1)
}

/// Patch scores on scaled event histograms.
pub fn disc_event(g: &Graph, b: Bind, events: Var) -> Result<Var> {
    let h = g.leaky_relu(b.conv(g, "f_evt.c1", events, 2)?, LEAK);
    let h = g.leaky_relu(b.conv(g, "f_evt.c2", h, 2)?, LEAK);
    b.conv(g, "f_evt.c3", h, 1)
}
