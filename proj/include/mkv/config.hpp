#pragma once

#include <string>

#include "mkv/errors.hpp"

namespace mkv {

// Decoder-only transformer dimensions.  head_dim is the per-head width that
// the KV projections compress; model width is n_heads * head_dim.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 4;
  int head_dim = 16;
  int vocab = 256;
  int context = 64;
  double rope_base = 10000.0;

  int model_dim() const { return n_heads * head_dim; }
  int kv_dim() const { return n_kv_heads * head_dim; }
  int mlp_hidden() const { return 2 * model_dim(); }
  int group_size() const { return n_heads / n_kv_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || head_dim < 1 || vocab < 2 || context < 1)
      throw ConfigError("model config: all dimensions must be positive (vocab >= 2)");
    if (n_heads % n_kv_heads != 0)
      throw ConfigError("model config: n_heads must be a multiple of n_kv_heads");
    if (head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even (rotary pairs)");
    if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
  }

  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && n_heads == o.n_heads && n_kv_heads == o.n_kv_heads &&
           head_dim == o.head_dim && vocab == o.vocab && context == o.context &&
           rope_base == o.rope_base;
  }
};

}  // namespace mkv
