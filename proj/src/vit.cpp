#include "gevit/vit.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "gevit/rng.hpp"

namespace gevit {

namespace {

constexpr double kMaskOff = -1e30;  // exp() underflows to exactly 0

Tensor uniform_init(Shape shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(shape, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor normal_init(Shape shape, double sigma, Rng& rng) {
    Tensor t = Tensor::zeros(shape, true);
    for (auto& v : t.data()) v = rng.normal(0.0, sigma);
    return t;
}

Tensor ln_affine(const Tensor& x, const Tensor& g, const Tensor& b) {
    return add_rowvec(mul_rowvec(layernorm(x), g), b);
}

}  // namespace

void ViTConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || channels < 1 || embed_dim < 1 || num_heads < 1 ||
        num_layers < 1 || num_classes < 1 || embedding_dim_out < 1 || domain_hidden < 1)
        throw std::invalid_argument("ViTConfig: all counts must be >= 1");
    if (image_size % patch_size != 0)
        throw std::invalid_argument("ViTConfig: image_size " + std::to_string(image_size) +
                                    " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
        throw std::invalid_argument("ViTConfig: embed_dim " + std::to_string(embed_dim) +
                                    " not divisible by num_heads " + std::to_string(num_heads));
    if (!(cosine_temperature > 0.0))
        throw std::invalid_argument("ViTConfig: cosine_temperature must be > 0");
}

ViTModel ViTModel::init(const ViTConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x76697431));
    ViTModel m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;
    const int pd = cfg.patch_size * cfg.patch_size * cfg.channels;
    const int hidden = 4 * d;
    const int dout = cfg.embedding_dim_out;

    m.patch_w = uniform_init({pd, d}, pd, rng);
    m.patch_b = uniform_init({d}, pd, rng);
    m.cls_token = normal_init({1, d}, 0.02, rng);
    m.pos_embed = normal_init({cfg.tokens(), d}, 0.02, rng);

    m.blocks.resize(cfg.num_layers);
    for (auto& b : m.blocks) {
        b.ln1_g = Tensor::full({d}, 1.0, true);
        b.ln1_b = Tensor::zeros({d}, true);
        b.wq = uniform_init({d, d}, d, rng);
        b.bq = uniform_init({d}, d, rng);
        b.wk = uniform_init({d, d}, d, rng);
        b.bk = uniform_init({d}, d, rng);
        b.wv = uniform_init({d, d}, d, rng);
        b.bv = uniform_init({d}, d, rng);
        b.wo = uniform_init({d, d}, d, rng);
        b.bo = uniform_init({d}, d, rng);
        b.ln2_g = Tensor::full({d}, 1.0, true);
        b.ln2_b = Tensor::zeros({d}, true);
        b.mlp_w1 = uniform_init({d, hidden}, d, rng);
        b.mlp_b1 = uniform_init({hidden}, d, rng);
        b.mlp_w2 = uniform_init({hidden, d}, hidden, rng);
        b.mlp_b2 = uniform_init({d}, hidden, rng);
    }
    m.ln_f_g = Tensor::full({d}, 1.0, true);
    m.ln_f_b = Tensor::zeros({d}, true);
    m.out_w = uniform_init({dout, d}, d, rng);
    m.out_b = uniform_init({dout}, d, rng);

    m.head_w = uniform_init({cfg.num_classes, dout}, dout, rng);
    m.head_b = uniform_init({cfg.num_classes}, dout, rng);
    m.cos_w = uniform_init({cfg.num_classes, dout}, dout, rng);

    const int dh = cfg.domain_hidden;
    m.dom_w1 = uniform_init({dh, dout}, dout, rng);
    m.dom_b1 = uniform_init({dh}, dout, rng);
    m.dom_w2 = uniform_init({dh, dh}, dh, rng);
    m.dom_b2 = uniform_init({dh}, dh, rng);
    m.dom_w3 = uniform_init({2, dh}, dh, rng);
    m.dom_b3 = uniform_init({2}, dh, rng);
    return m;
}

std::vector<std::pair<std::string, Tensor>> ViTModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_w);
    out.emplace_back("patch.b", patch_b);
    out.emplace_back("cls", cls_token);
    out.emplace_back("pos", pos_embed);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.g", b.ln1_g);
        out.emplace_back(p + "ln1.b", b.ln1_b);
        out.emplace_back(p + "wq", b.wq);
        out.emplace_back(p + "bq", b.bq);
        out.emplace_back(p + "wk", b.wk);
        out.emplace_back(p + "bk", b.bk);
        out.emplace_back(p + "wv", b.wv);
        out.emplace_back(p + "bv", b.bv);
        out.emplace_back(p + "wo", b.wo);
        out.emplace_back(p + "bo", b.bo);
        out.emplace_back(p + "ln2.g", b.ln2_g);
        out.emplace_back(p + "ln2.b", b.ln2_b);
        out.emplace_back(p + "mlp.w1", b.mlp_w1);
        out.emplace_back(p + "mlp.b1", b.mlp_b1);
        out.emplace_back(p + "mlp.w2", b.mlp_w2);
        out.emplace_back(p + "mlp.b2", b.mlp_b2);
    }
    out.emplace_back("ln_f.g", ln_f_g);
    out.emplace_back("ln_f.b", ln_f_b);
    out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    out.emplace_back("cos.w", cos_w);
    out.emplace_back("dom.w1", dom_w1);
    out.emplace_back("dom.b1", dom_b1);
    out.emplace_back("dom.w2", dom_w2);
    out.emplace_back("dom.b2", dom_b2);
    out.emplace_back("dom.w3", dom_w3);
    out.emplace_back("dom.b3", dom_b3);
    return out;
}

std::vector<Tensor> ViTModel::encoder_params() const {
    std::vector<Tensor> out{patch_w, patch_b, cls_token, pos_embed};
    for (const auto& b : blocks)
        for (const auto& t : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv,
                              b.wo, b.bo, b.ln2_g, b.ln2_b, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2})
            out.push_back(t);
    out.push_back(ln_f_g);
    out.push_back(ln_f_b);
    out.push_back(out_w);
    out.push_back(out_b);
    return out;
}

std::vector<Tensor> ViTModel::classifier_params() const {
    if (head_kind == HeadKind::Linear) return {head_w, head_b};
    return {cos_w};
}

std::vector<Tensor> ViTModel::domain_params() const {
    return {dom_w1, dom_b1, dom_w2, dom_b2, dom_w3, dom_b3};
}

void ViTModel::zero_all_grads() const {
    for (auto& [name, t] : named_params()) {
        (void)name;
        const_cast<Tensor&>(t).zero_grad();
    }
}

Tensor attention_mask(const ViTConfig& cfg, int window) {
    if (window < 0) return Tensor();
    const int g = cfg.grid();
    if (window >= g - 1) return Tensor();  // covers the whole grid: no-op
    const int T = cfg.tokens();
    Tensor mask = Tensor::zeros({T, T});
    auto& mv = mask.data();
    for (int i = 0; i < g * g; ++i) {
        const int yi = i / g, xi = i % g;
        for (int j = 0; j < g * g; ++j) {
            const int yj = j / g, xj = j % g;
            const int cheb = std::max(std::abs(yi - yj), std::abs(xi - xj));
            if (cheb > window) mv[static_cast<size_t>(i + 1) * T + (j + 1)] = kMaskOff;
        }
    }
    return mask;
}

Tensor patch_embed(const ViTModel& m, const Tensor& image) {
    const auto& cfg = m.cfg;
    if (image.shape() != Shape{cfg.channels, cfg.image_size, cfg.image_size})
        throw std::invalid_argument("patch_embed: image " + shape_str(image.shape()) + " does not match config [" +
                                    std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                                    std::to_string(cfg.image_size) + "]");
    const int g = cfg.grid(), p = cfg.patch_size, C = cfg.channels, hw = cfg.image_size;
    const int pd = p * p * C;
    Tensor patches = Tensor::zeros({g * g, pd});
    auto& pv = patches.data();
    const auto& iv = image.data();
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            double* row = pv.data() + static_cast<size_t>(gy * g + gx) * pd;
            int k = 0;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        row[k++] = iv[(static_cast<size_t>(c) * hw + gy * p + py) * hw + gx * p + px];
        }
    Tensor tok = add_rowvec(matmul(patches, m.patch_w), m.patch_b);
    return add(concat_rows(m.cls_token, tok), m.pos_embed);
}

Tensor mhsa_forward(const Tensor& tokens, const BlockParams& p, int num_heads, const Tensor& mask,
                    AttnTrace* trace) {
    const int d = tokens.cols();
    if (d % num_heads != 0)
        throw std::invalid_argument("mhsa_forward: dim " + std::to_string(d) + " not divisible by heads " +
                                    std::to_string(num_heads));
    const int dh = d / num_heads;
    Tensor q = add_rowvec(matmul(tokens, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(tokens, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(tokens, p.wv), p.bv);
    std::vector<Tensor> heads;
    heads.reserve(num_heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < num_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (mask.defined()) scores = add(scores, mask);
        Tensor attn = softmax(scores);
        if (trace) trace->weights.push_back(attn);
        heads.push_back(matmul(attn, vh));
    }
    return add_rowvec(matmul(concat_cols(heads), p.wo), p.bo);
}

Tensor encode(const ViTModel& m, const Tensor& image, int window, AttnTrace* trace) {
    Tensor mask = attention_mask(m.cfg, window);
    Tensor x = patch_embed(m, image);
    for (const auto& b : m.blocks) {
        x = add(x, mhsa_forward(ln_affine(x, b.ln1_g, b.ln1_b), b, m.cfg.num_heads, mask, trace));
        Tensor h = ln_affine(x, b.ln2_g, b.ln2_b);
        h = add_rowvec(matmul(gelu(add_rowvec(matmul(h, b.mlp_w1), b.mlp_b1)), b.mlp_w2), b.mlp_b2);
        x = add(x, h);
    }
    Tensor cls = take_row(ln_affine(x, m.ln_f_g, m.ln_f_b), 0);
    return affine(m.out_w, cls, m.out_b);
}

Tensor linear_head(const ViTModel& m, const Tensor& f) { return affine(m.head_w, f, m.head_b); }

Tensor cosine_head(const Tensor& weights, double temperature, const Tensor& f) {
    if (!(temperature > 0.0)) throw std::invalid_argument("cosine_head: temperature must be > 0");
    return scale(matvec(l2_normalize(weights), l2_normalize(f)), 1.0 / temperature);
}

Tensor cosine_head(const ViTModel& m, const Tensor& f) {
    return cosine_head(m.cos_w, m.cfg.cosine_temperature, f);
}

Tensor domain_head(const ViTModel& m, const Tensor& f) {
    Tensor h1 = gelu(affine(m.dom_w1, f, m.dom_b1));
    Tensor h2 = gelu(affine(m.dom_w2, h1, m.dom_b2));
    return affine(m.dom_w3, h2, m.dom_b3);
}

Tensor classify(const ViTModel& m, const Tensor& f) {
    return m.head_kind == HeadKind::Linear ? linear_head(m, f) : cosine_head(m, f);
}

Tensor resize_pos_embed(const Tensor& pos, int new_grid) {
    if (pos.shape().size() != 2)
        throw std::invalid_argument("resize_pos_embed: expected 2-D, got " + shape_str(pos.shape()));
    if (new_grid < 1) throw std::invalid_argument("resize_pos_embed: new grid must be >= 1");
    const int rows = pos.shape()[0], d = pos.shape()[1];
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(rows - 1))));
    if (g * g + 1 != rows)
        throw std::invalid_argument("resize_pos_embed: row count " + std::to_string(rows) +
                                    " is not a grid plus class row");
    const int gn = new_grid;
    Tensor out = Tensor::zeros({gn * gn + 1, d}, pos.requires_grad());
    const auto& src = pos.data();
    auto& dst = out.data();
    std::copy(src.begin(), src.begin() + d, dst.begin());  // class-token row
    for (int i = 0; i < gn; ++i) {
        const double sy = gn > 1 ? static_cast<double>(i) * (g - 1) / (gn - 1) : 0.0;
        const int y0 = std::min(static_cast<int>(sy), g - 1);
        const int y1 = std::min(y0 + 1, g - 1);
        const double fy = sy - y0;
        for (int j = 0; j < gn; ++j) {
            const double sx = gn > 1 ? static_cast<double>(j) * (g - 1) / (gn - 1) : 0.0;
            const int x0 = std::min(static_cast<int>(sx), g - 1);
            const int x1 = std::min(x0 + 1, g - 1);
            const double fx = sx - x0;
            double* o = dst.data() + static_cast<size_t>(i * gn + j + 1) * d;
            const double* a = src.data() + static_cast<size_t>(y0 * g + x0 + 1) * d;
            const double* b = src.data() + static_cast<size_t>(y0 * g + x1 + 1) * d;
            const double* c = src.data() + static_cast<size_t>(y1 * g + x0 + 1) * d;
            const double* e = src.data() + static_cast<size_t>(y1 * g + x1 + 1) * d;
            for (int t = 0; t < d; ++t)
                o[t] = (1 - fy) * ((1 - fx) * a[t] + fx * b[t]) + fy * ((1 - fx) * c[t] + fx * e[t]);
        }
    }
    return out;
}

// ------------------------------------------------------------- checkpoint io

namespace {

void put_u16(std::ostream& os, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

void write_entry(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.shape().size()));
    for (int e : t.shape()) put_u32(os, static_cast<uint32_t>(e));
    for (double d : t.data()) put_f64(os, d);
}

constexpr char kMagic[9] = "GEVIT001";

}  // namespace

void save_checkpoint(const std::string& path, const ViTModel& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kMagic, 8);
    auto meta = [&](const std::string& name, double v) { write_entry(os, name, Tensor::scalar(v)); };
    meta("meta.image_size", m.cfg.image_size);
    meta("meta.patch_size", m.cfg.patch_size);
    meta("meta.channels", m.cfg.channels);
    meta("meta.embed_dim", m.cfg.embed_dim);
    meta("meta.num_heads", m.cfg.num_heads);
    meta("meta.num_layers", m.cfg.num_layers);
    meta("meta.num_classes", m.cfg.num_classes);
    meta("meta.embedding_dim_out", m.cfg.embedding_dim_out);
    meta("meta.cosine_temperature", m.cfg.cosine_temperature);
    meta("meta.domain_hidden", m.cfg.domain_hidden);
    meta("meta.head_kind", static_cast<double>(m.head_kind));
    for (const auto& [name, t] : m.named_params()) write_entry(os, name, t);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ViTModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);

    std::map<std::string, Tensor> entries;
    for (;;) {
        const uint16_t len = get_u16(is);
        if (is.eof() || !is) break;
        std::string name(len, '\0');
        is.read(name.data(), len);
        const int rank = is.get();
        Shape shape;
        size_t numel = 1;
        for (int i = 0; i < rank; ++i) {
            shape.push_back(static_cast<int>(get_u32(is)));
            numel *= static_cast<size_t>(shape.back());
        }
        std::vector<double> data(numel);
        for (auto& d : data) d = get_f64(is);
        if (!is) throw std::runtime_error("load_checkpoint: truncated entry '" + name + "' in " + path);
        entries.emplace(name, Tensor::from_data(shape, std::move(data)));
    }

    auto meta = [&](const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("load_checkpoint: missing " + name);
        return it->second.value();
    };
    ViTConfig cfg;
    cfg.image_size = static_cast<int>(meta("meta.image_size"));
    cfg.patch_size = static_cast<int>(meta("meta.patch_size"));
    cfg.channels = static_cast<int>(meta("meta.channels"));
    cfg.embed_dim = static_cast<int>(meta("meta.embed_dim"));
    cfg.num_heads = static_cast<int>(meta("meta.num_heads"));
    cfg.num_layers = static_cast<int>(meta("meta.num_layers"));
    cfg.num_classes = static_cast<int>(meta("meta.num_classes"));
    cfg.embedding_dim_out = static_cast<int>(meta("meta.embedding_dim_out"));
    cfg.cosine_temperature = meta("meta.cosine_temperature");
    cfg.domain_hidden = static_cast<int>(meta("meta.domain_hidden"));

    ViTModel m = ViTModel::init(cfg, 0);
    m.head_kind = static_cast<HeadKind>(static_cast<int>(meta("meta.head_kind")));
    for (auto& [name, t] : m.named_params()) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("load_checkpoint: missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": " +
                                     shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
        const_cast<Tensor&>(t).data() = it->second.data();
    }
    return m;
}

}  // namespace gevit
