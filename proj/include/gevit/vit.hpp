#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gevit/tensor.hpp"

namespace gevit {

struct ViTConfig {
    int image_size{32};
    int patch_size{4};
    int channels{3};
    int embed_dim{64};
    int num_heads{4};
    int num_layers{4};
    int num_classes{9};
    int embedding_dim_out{64};
    double cosine_temperature{0.05};
    int domain_hidden{64};

    void validate() const;
    int grid() const { return image_size / patch_size; }
    int patch_tokens() const { return grid() * grid(); }
    int tokens() const { return patch_tokens() + 1; }
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

enum class HeadKind { Linear = 0, Cosine = 1 };

// Encoder F plus the three heads: linear label predictor, cosine classifier
// with per-class weight vectors, and a 3-layer domain MLP.
struct ViTModel {
    ViTConfig cfg;
    HeadKind head_kind{HeadKind::Linear};

    Tensor patch_w, patch_b;  // [p*p*C x d], [d]
    Tensor cls_token;         // [1 x d]
    Tensor pos_embed;         // [tokens x d]
    std::vector<BlockParams> blocks;
    Tensor ln_f_g, ln_f_b;
    Tensor out_w, out_b;  // [d_out x d], [d_out]

    Tensor head_w, head_b;  // [n_c x d_out], [n_c]
    Tensor cos_w;           // [n_c x d_out], normalized inside the forward op
    Tensor dom_w1, dom_b1, dom_w2, dom_b2, dom_w3, dom_b3;

    static ViTModel init(const ViTConfig& cfg, uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named_params() const;
    std::vector<Tensor> encoder_params() const;
    std::vector<Tensor> classifier_params() const;  // params of the active head
    std::vector<Tensor> domain_params() const;
    void zero_all_grads() const;
};

struct AttnTrace {
    std::vector<Tensor> weights;  // one [T x T] row-stochastic matrix per (layer, head)
};

// Additive attention mask for a receptive-field radius on the patch grid
// (Chebyshev distance); the class token stays globally connected. Returns an
// undefined tensor when the window does not mask anything (negative radius or
// radius covering the whole grid), so the unmasked path is taken bit-exactly.
Tensor attention_mask(const ViTConfig& cfg, int window);

Tensor patch_embed(const ViTModel& m, const Tensor& image);
Tensor mhsa_forward(const Tensor& tokens, const BlockParams& p, int num_heads,
                    const Tensor& mask = Tensor(), AttnTrace* trace = nullptr);
Tensor encode(const ViTModel& m, const Tensor& image, int window = -1, AttnTrace* trace = nullptr);

Tensor linear_head(const ViTModel& m, const Tensor& f);
Tensor cosine_head(const Tensor& weights, double temperature, const Tensor& f);
Tensor cosine_head(const ViTModel& m, const Tensor& f);
Tensor domain_head(const ViTModel& m, const Tensor& f);
Tensor classify(const ViTModel& m, const Tensor& f);  // dispatches on head_kind

// 2-D bilinear resize of the patch-position rows to a new grid; class-token
// row passes through unchanged. Corner values are preserved.
Tensor resize_pos_embed(const Tensor& pos, int new_grid);

// Checkpoint format: magic "GEVIT001", then per named tensor: name length
// (u16 LE), name bytes, rank (u8), extents (u32 LE each), data (f64 LE).
void save_checkpoint(const std::string& path, const ViTModel& m);
ViTModel load_checkpoint(const std::string& path);

}  // namespace gevit
