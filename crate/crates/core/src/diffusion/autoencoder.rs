//! Toy convolutional autoencoder: 64x64x3 images to a 4x16x16 latent.

use rand_chacha::ChaCha12Rng;

use crate::graph::{Graph, NodeId, ParamStore, Partition};
use crate::nn::Conv2d;

#[derive(Debug, Clone)]
pub struct Autoencoder {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, latent_ch: usize, rng: &mut ChaCha12Rng) -> Self {
        let p = Partition::Backbone;
        let enc = vec![
            Conv2d::new(store, "ae.enc0", 3, 32, 3, 2, 1, p, rng),
            Conv2d::new(store, "ae.enc1", 32, 64, 3, 2, 1, p, rng),
            Conv2d::new(store, "ae.enc2", 64, latent_ch, 3, 1, 1, p, rng),
        ];
        let dec = vec![
            Conv2d::new(store, "ae.dec0", latent_ch, 64, 3, 1, 1, p, rng),
            Conv2d::new(store, "ae.dec1", 64, 32, 3, 1, 1, p, rng),
            Conv2d::new(store, "ae.dec2", 32, 16, 3, 1, 1, p, rng),
            Conv2d::new(store, "ae.dec3", 16, 3, 3, 1, 1, p, rng),
        ];
        Autoencoder { enc, dec }
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        4
    }

    pub fn encode(&self, g: &mut Graph, img: NodeId) -> NodeId {
        let mut x = self.enc[0].forward(g, img);
        x = g.gelu(x);
        x = self.enc[1].forward(g, x);
        x = g.gelu(x);
        self.enc[2].forward(g, x)
    }

    pub fn decode(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let mut x = self.dec[0].forward(g, z);
        x = g.gelu(x);
        x = g.upsample_nearest2(x);
        x = self.dec[1].forward(g, x);
        x = g.gelu(x);
        x = g.upsample_nearest2(x);
        x = self.dec[2].forward(g, x);
        x = g.gelu(x);
        self.dec[3].forward(g, x)
    }
}
