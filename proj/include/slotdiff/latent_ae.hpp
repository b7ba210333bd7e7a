#pragma once

#include "slotdiff/backbone.hpp"

// Optional latent mode: a small conv autoencoder with 2x spatial
// downsampling, trained separately by pixel MSE. The encoder squashes
// latents through tanh so the diffusion process sees values in (-1,1).

namespace slotdiff {

template <typename S>
struct LatentAE {
  int z_channels = 4, hidden = 16;
  Conv2dM<S> e1, e2, d1, d2;

  void init(int zc, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    z_channels = zc;
    e1.init(3, hidden, 3, 1, 1, rng, ps, name + ".e1");
    e2.init(hidden, zc, 3, 2, 1, rng, ps, name + ".e2");
    d1.init(zc, hidden, 3, 1, 1, rng, ps, name + ".d1");
    d2.init(hidden, 3, 3, 1, 1, rng, ps, name + ".d2");
  }

  // [B,3,H,W] -> [B,zc,H/2,W/2] in (-1,1)
  Var<S> encode(Tape<S>& t, Var<S> img) const { return tanh_v(e2(t, relu(e1(t, img)))); }

  // [B,zc,h,w] -> [B,3,2h,2w] in (0,1)
  Var<S> decode(Tape<S>& t, Var<S> z) const {
    return sigmoid_v(d2(t, relu(d1(t, upsample_nearest2x(z)))));
  }

  Var<S> recon_loss(Tape<S>& t, Var<S> img) const { return mse_loss(decode(t, encode(t, img)), img); }

  Tensor<S> encode_value(const Tensor<S>& img_chw) const {
    Tape<S> t;
    NoGradScope<S> ng(t);
    Tensor<S> x = img_chw;
    if (x.rank() == 3) x.shape.insert(x.shape.begin(), 1);
    Tensor<S> z = t.val(encode(t, t.input(std::move(x))));
    z.shape.erase(z.shape.begin());
    return z;
  }

  Tensor<S> decode_value(const Tensor<S>& z) const {
    Tape<S> t;
    NoGradScope<S> ng(t);
    Tensor<S> x = z;
    if (x.rank() == 3) x.shape.insert(x.shape.begin(), 1);
    Tensor<S> img = t.val(decode(t, t.input(std::move(x))));
    img.shape.erase(img.shape.begin());
    return img;
  }
};

}  // namespace slotdiff
