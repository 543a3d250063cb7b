#pragma once

// Pluggable feature extractors. Desk-scale defaults: a ReLU MLP for
// feature-vector payloads and a small convnet (conv-pool-conv-GAP) for
// image payloads. Both expose the same train/infer surface so the
// embedding and deferral trainers do not care which one they drive.

#include <iostream>
#include <memory>
#include <sstream>

#include "deferkit/dataset.hpp"
#include "deferkit/nn.hpp"

namespace deferkit {

struct Backbone {
    virtual ~Backbone() = default;
    virtual Matrix forward(const Matrix& x) = 0;          // caches for backward
    virtual Matrix infer(const Matrix& x) const = 0;      // no caching, eval mode
    virtual Matrix backward(const Matrix& d_features) = 0;
    virtual void zero_grad() = 0;
    virtual void step(double lr, double momentum, bool nesterov) = 0;
    virtual void params(std::vector<ParamView>& out) = 0;
    virtual void grads(std::vector<ParamView>& out) = 0;
    virtual int in_dim() const = 0;
    virtual int out_dim() const = 0;
    virtual void save(std::ostream& os) const = 0;
    virtual std::string kind() const = 0;
};

namespace detail {

inline void write_matrix(std::ostream& os, const Matrix& m) {
    os << m.rows() << " " << m.cols() << "\n";
    os.precision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
        os << "\n";
    }
}

inline Matrix read_matrix(std::istream& is) {
    Eigen::Index r, c;
    if (!(is >> r >> c)) throw ParseError("checkpoint: bad matrix header");
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
            if (!(is >> m(i, j))) throw ParseError("checkpoint: truncated matrix");
    return m;
}

inline void write_linear(std::ostream& os, const Linear& l) {
    write_matrix(os, l.W);
    write_matrix(os, l.b);
}

inline Linear read_linear(std::istream& is) {
    Linear l;
    l.W = read_matrix(is);
    l.b = read_matrix(is);
    l.gW = Matrix::Zero(l.W.rows(), l.W.cols());
    l.gb = Vector::Zero(l.b.size());
    l.vW = Matrix::Zero(l.W.rows(), l.W.cols());
    l.vb = Vector::Zero(l.b.size());
    return l;
}

}  // namespace detail

class MlpBackbone : public Backbone {
  public:
    MlpBackbone() = default;
    MlpBackbone(int in, const std::vector<int>& hidden, int out, Rng& rng)
        : net_(in, hidden, out, rng) {}

    Matrix forward(const Matrix& x) override { return net_.forward(x); }
    Matrix infer(const Matrix& x) const override { return net_.infer(x); }
    Matrix backward(const Matrix& d) override { return net_.backward(d); }
    void zero_grad() override { net_.zero_grad(); }
    void step(double lr, double mu, bool nesterov) override { net_.step(lr, mu, nesterov); }
    void params(std::vector<ParamView>& out) override { net_.params(out); }
    void grads(std::vector<ParamView>& out) override { net_.grads(out); }
    int in_dim() const override { return net_.in_dim(); }
    int out_dim() const override { return net_.out_dim(); }
    std::string kind() const override { return "mlp"; }

    void save(std::ostream& os) const override {
        os << "mlp " << net_.layers.size() << "\n";
        for (const auto& l : net_.layers) detail::write_linear(os, l);
    }
    static std::unique_ptr<MlpBackbone> load(std::istream& is) {
        std::size_t nl;
        if (!(is >> nl)) throw ParseError("checkpoint: bad mlp header");
        auto bb = std::make_unique<MlpBackbone>();
        for (std::size_t i = 0; i < nl; ++i) bb->net_.layers.push_back(detail::read_linear(is));
        return bb;
    }

    Mlp& net() { return net_; }

  private:
    Mlp net_;
};

// 3x3 same-padding convolution via im2col, one sample at a time.
struct Conv3x3 {
    int h = 0, w = 0, cin = 0, cout = 0;
    Linear lin;  // (9*cin) x cout
    std::vector<Matrix> cache_cols;

    Conv3x3() = default;
    Conv3x3(int h_, int w_, int cin_, int cout_, Rng& rng)
        : h(h_), w(w_), cin(cin_), cout(cout_), lin(9 * cin_, cout_, rng) {}

    Matrix im2col(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        Matrix cols = Matrix::Zero(h * w, 9 * cin);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                int row = y * w + xx;
                int col = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        for (int c = 0; c < cin; ++c, ++col) {
                            int sy = y + dy, sx = xx + dx;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            cols(row, col) = x[(sy * w + sx) * cin + c];
                        }
            }
        return cols;
    }

    // x: n x (h*w*cin), returns n x (h*w*cout)
    Matrix forward(const Matrix& x, bool cache) {
        Matrix out(x.rows(), h * w * cout);
        if (cache) cache_cols.assign(std::size_t(x.rows()), Matrix());
        for (Eigen::Index s = 0; s < x.rows(); ++s) {
            Matrix cols = im2col(x.row(s));
            Matrix y = (cols * lin.W).rowwise() + lin.b.transpose();
            if (cache) cache_cols[std::size_t(s)] = std::move(cols);
            // interleaved channel-last layout, matching the input convention
            for (int p = 0; p < h * w; ++p)
                for (int c = 0; c < cout; ++c) out(s, p * cout + c) = y(p, c);
        }
        return out;
    }

    Matrix backward(const Matrix& d_out) {
        Matrix dx = Matrix::Zero(d_out.rows(), h * w * cin);
        for (Eigen::Index s = 0; s < d_out.rows(); ++s) {
            Matrix dy(h * w, cout);
            for (int p = 0; p < h * w; ++p)
                for (int c = 0; c < cout; ++c) dy(p, c) = d_out(s, p * cout + c);
            lin.gW += cache_cols[std::size_t(s)].transpose() * dy;
            lin.gb += dy.colwise().sum().transpose();
            Matrix dcols = dy * lin.W.transpose();
            // scatter-add the column gradients back onto the input grid
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    int row = y * w + xx;
                    int col = 0;
                    for (int dyo = -1; dyo <= 1; ++dyo)
                        for (int dxo = -1; dxo <= 1; ++dxo)
                            for (int c = 0; c < cin; ++c, ++col) {
                                int sy = y + dyo, sx = xx + dxo;
                                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                                dx(s, (sy * w + sx) * cin + c) += dcols(row, col);
                            }
                }
        }
        return dx;
    }
};

/// conv3x3 -> ReLU -> maxpool2 -> conv3x3 -> ReLU -> global average pool
/// -> linear(d). Input layout per row: (y, x, channel), row-major.
class ConvBackbone : public Backbone {
  public:
    ConvBackbone() = default;
    ConvBackbone(int h, int w, int c, int c1, int c2, int d, Rng& rng)
        : h_(h), w_(w), c_(c), c1_(c1), c2_(c2),
          conv1_(h, w, c, c1, rng),
          conv2_(h / 2, w / 2, c1, c2, rng),
          head_(c2, d, rng) {}

    int in_dim() const override { return h_ * w_ * c_; }
    int out_dim() const override { return head_.out_dim(); }
    std::string kind() const override { return "conv"; }

    Matrix forward(const Matrix& x) override { return run(x, true); }
    Matrix infer(const Matrix& x) const override {
        return const_cast<ConvBackbone*>(this)->run_nocache(x);
    }

    Matrix backward(const Matrix& d_feat) override {
        const int ph = h_ / 2, pw = w_ / 2;
        Matrix d_gap = head_.backward(d_feat);  // n x c2
        // undo global average pool
        Matrix d_relu2 = Matrix::Zero(d_feat.rows(), ph * pw * c2_);
        for (Eigen::Index s = 0; s < d_feat.rows(); ++s)
            for (int p = 0; p < ph * pw; ++p)
                for (int c = 0; c < c2_; ++c)
                    d_relu2(s, p * c2_ + c) = d_gap(s, c) / double(ph * pw);
        Matrix d_conv2 = d_relu2.cwiseProduct((pre2_.array() > 0.0).cast<double>().matrix());
        Matrix d_pool = conv2_.backward(d_conv2);
        // undo maxpool through stored argmax
        Matrix d_relu1 = Matrix::Zero(d_feat.rows(), h_ * w_ * c1_);
        for (Eigen::Index s = 0; s < d_feat.rows(); ++s)
            for (Eigen::Index j = 0; j < d_pool.cols(); ++j)
                d_relu1(s, pool_arg_[std::size_t(s)][std::size_t(j)]) += d_pool(s, j);
        Matrix d_conv1 = d_relu1.cwiseProduct((pre1_.array() > 0.0).cast<double>().matrix());
        return conv1_.backward(d_conv1);
    }

    void zero_grad() override {
        conv1_.lin.zero_grad();
        conv2_.lin.zero_grad();
        head_.zero_grad();
    }
    void step(double lr, double mu, bool nesterov) override {
        conv1_.lin.step(lr, mu, nesterov);
        conv2_.lin.step(lr, mu, nesterov);
        head_.step(lr, mu, nesterov);
    }
    void params(std::vector<ParamView>& out) override {
        conv1_.lin.params(out);
        conv2_.lin.params(out);
        head_.params(out);
    }
    void grads(std::vector<ParamView>& out) override {
        conv1_.lin.grads(out);
        conv2_.lin.grads(out);
        head_.grads(out);
    }

    void save(std::ostream& os) const override {
        os << "conv " << h_ << " " << w_ << " " << c_ << " " << c1_ << " " << c2_ << "\n";
        detail::write_linear(os, conv1_.lin);
        detail::write_linear(os, conv2_.lin);
        detail::write_linear(os, head_);
    }
    static std::unique_ptr<ConvBackbone> load(std::istream& is) {
        auto bb = std::make_unique<ConvBackbone>();
        if (!(is >> bb->h_ >> bb->w_ >> bb->c_ >> bb->c1_ >> bb->c2_))
            throw ParseError("checkpoint: bad conv header");
        bb->conv1_ = Conv3x3();
        bb->conv1_.h = bb->h_;
        bb->conv1_.w = bb->w_;
        bb->conv1_.cin = bb->c_;
        bb->conv1_.cout = bb->c1_;
        bb->conv1_.lin = detail::read_linear(is);
        bb->conv2_.h = bb->h_ / 2;
        bb->conv2_.w = bb->w_ / 2;
        bb->conv2_.cin = bb->c1_;
        bb->conv2_.cout = bb->c2_;
        bb->conv2_.lin = detail::read_linear(is);
        bb->head_ = detail::read_linear(is);
        return bb;
    }

  private:
    Matrix run(const Matrix& x, bool cache) {
        const int ph = h_ / 2, pw = w_ / 2;
        Matrix pre1 = conv1_.forward(x, cache);
        Matrix a1 = pre1.cwiseMax(0.0);
        // 2x2 max pool, stride 2
        Matrix pooled(x.rows(), ph * pw * c1_);
        std::vector<std::vector<Eigen::Index>> arg(std::size_t(x.rows()),
                                                   std::vector<Eigen::Index>(std::size_t(ph * pw * c1_)));
        for (Eigen::Index s = 0; s < x.rows(); ++s) {
            for (int y = 0; y < ph; ++y)
                for (int xx = 0; xx < pw; ++xx)
                    for (int c = 0; c < c1_; ++c) {
                        double best = -1e300;
                        Eigen::Index best_idx = 0;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                Eigen::Index idx = ((2 * y + dy) * w_ + (2 * xx + dx)) * c1_ + c;
                                if (a1(s, idx) > best) {
                                    best = a1(s, idx);
                                    best_idx = idx;
                                }
                            }
                        Eigen::Index out_idx = (y * pw + xx) * c1_ + c;
                        pooled(s, out_idx) = best;
                        arg[std::size_t(s)][std::size_t(out_idx)] = best_idx;
                    }
        }
        Matrix pre2 = conv2_.forward(pooled, cache);
        Matrix a2 = pre2.cwiseMax(0.0);
        // global average pool per channel
        Matrix gap = Matrix::Zero(x.rows(), c2_);
        for (Eigen::Index s = 0; s < x.rows(); ++s)
            for (int p = 0; p < ph * pw; ++p)
                for (int c = 0; c < c2_; ++c) gap(s, c) += a2(s, p * c2_ + c) / double(ph * pw);
        if (cache) {
            pre1_ = std::move(pre1);
            pre2_ = std::move(pre2);
            pool_arg_ = std::move(arg);
            return head_.forward(gap);
        }
        return head_.infer(gap);
    }
    Matrix run_nocache(const Matrix& x) { return run(x, false); }

    int h_ = 0, w_ = 0, c_ = 0, c1_ = 8, c2_ = 16;
    Conv3x3 conv1_, conv2_;
    Linear head_;
    Matrix pre1_, pre2_;
    std::vector<std::vector<Eigen::Index>> pool_arg_;
};

struct BackboneConfig {
    std::vector<int> hidden = {64, 32};  // mlp hidden layers
    int conv_c1 = 8;
    int conv_c2 = 16;
    int feature_dim = 32;  // d

    std::string fingerprint() const {
        std::ostringstream os;
        os << "mlp:";
        for (int v : hidden) os << v << ",";
        os << " conv:" << conv_c1 << "," << conv_c2 << " d:" << feature_dim;
        return os.str();
    }
};

/// Picks the backbone type from the dataset's payload shape.
inline std::unique_ptr<Backbone> make_backbone(const Dataset& ds, const BackboneConfig& cfg,
                                               Rng& rng) {
    if (ds.img_h > 0)
        return std::make_unique<ConvBackbone>(ds.img_h, ds.img_w, ds.img_c, cfg.conv_c1,
                                              cfg.conv_c2, cfg.feature_dim, rng);
    return std::make_unique<MlpBackbone>(ds.payload_dim, cfg.hidden, cfg.feature_dim, rng);
}

inline void save_backbone(const Backbone& bb, std::ostream& os) { bb.save(os); }

inline std::unique_ptr<Backbone> load_backbone(std::istream& is) {
    std::string kind;
    if (!(is >> kind)) throw ParseError("checkpoint: missing backbone kind");
    if (kind == "mlp") return MlpBackbone::load(is);
    if (kind == "conv") return ConvBackbone::load(is);
    throw ParseError("checkpoint: unknown backbone kind '" + kind + "'");
}

}  // namespace deferkit
