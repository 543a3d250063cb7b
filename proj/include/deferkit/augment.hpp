#pragma once

// Weak/strong augmentation policies for the consistency-regularized
// expertise training. Image payloads get flip/translate (weak) and
// randomized intensity + geometry + occlusion (strong); feature payloads
// get additive Gaussian noise at two magnitudes.

#include "deferkit/common.hpp"
#include "deferkit/dataset.hpp"

namespace deferkit {

struct AugmentationPolicy {
    enum class Kind { identity, image, feature_noise };
    Kind kind = Kind::identity;

    // image, weak
    bool weak_flip = true;
    double weak_translate_frac = 0.125;
    // image, strong
    double strong_translate_frac = 0.25;
    double strong_intensity_scale = 0.4;   // scale drawn from [1-s, 1+s]
    double strong_intensity_shift = 0.2;   // shift drawn from [-t, t]
    double strong_occlusion_frac = 0.4;    // side of cutout square, fraction of min(H,W)
    // features
    double weak_noise_sigma = 0.05;
    double strong_noise_sigma = 0.30;

    static AugmentationPolicy for_dataset(const Dataset& ds) {
        AugmentationPolicy p;
        p.kind = ds.img_h > 0 ? Kind::image : Kind::feature_noise;
        return p;
    }
    static AugmentationPolicy identity_policy() { return AugmentationPolicy{}; }

    Payload weak(const Payload& x, Rng& rng) const { return apply(x, rng, false); }
    Payload strong(const Payload& x, Rng& rng) const { return apply(x, rng, true); }

  private:
    static double& px(Payload& p, int y, int x, int c) {
        return p.data[(Eigen::Index(y) * p.w + x) * p.c + c];
    }
    static double pxc(const Payload& p, int y, int x, int c) {
        return p.data[(Eigen::Index(y) * p.w + x) * p.c + c];
    }

    static Payload translate(const Payload& in, int dy, int dx) {
        Payload out = in;
        out.data.setZero();
        for (int y = 0; y < in.h; ++y) {
            int sy = y - dy;
            if (sy < 0 || sy >= in.h) continue;
            for (int x = 0; x < in.w; ++x) {
                int sx = x - dx;
                if (sx < 0 || sx >= in.w) continue;
                for (int c = 0; c < in.c; ++c) px(out, y, x, c) = pxc(in, sy, sx, c);
            }
        }
        return out;
    }

    static Payload hflip(const Payload& in) {
        Payload out = in;
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x)
                for (int c = 0; c < in.c; ++c) px(out, y, x, c) = pxc(in, y, in.w - 1 - x, c);
        return out;
    }

    Payload apply(const Payload& x, Rng& rng, bool strong) const {
        switch (kind) {
            case Kind::identity:
                return x;
            case Kind::feature_noise: {
                Payload out = x;
                std::normal_distribution<double> n(0.0, strong ? strong_noise_sigma
                                                               : weak_noise_sigma);
                for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data[i] += n(rng);
                return out;
            }
            case Kind::image:
                break;
        }
        if (!x.is_image()) throw InputError("image augmentation on non-image payload");
        Payload out = x;
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        // flip + translation (both strengths)
        if (weak_flip && u01(rng) < 0.5) out = hflip(out);
        double tf = strong ? strong_translate_frac : weak_translate_frac;
        int max_dy = int(tf * x.h);
        int max_dx = int(tf * x.w);
        std::uniform_int_distribution<int> ddy(-max_dy, max_dy), ddx(-max_dx, max_dx);
        out = translate(out, max_dy > 0 ? ddy(rng) : 0, max_dx > 0 ? ddx(rng) : 0);
        if (strong) {
            // randomized intensity
            std::uniform_real_distribution<double> sc(1.0 - strong_intensity_scale,
                                                      1.0 + strong_intensity_scale);
            std::uniform_real_distribution<double> sh(-strong_intensity_shift,
                                                      strong_intensity_shift);
            double a = sc(rng), b = sh(rng);
            out.data = ((out.data.array() * a + b).min(1.0).max(0.0)).matrix();
            // occlusion square
            int side = std::max(1, int(strong_occlusion_frac * std::min(x.h, x.w)));
            std::uniform_int_distribution<int> oy(0, std::max(0, x.h - side));
            std::uniform_int_distribution<int> ox(0, std::max(0, x.w - side));
            int y0 = oy(rng), x0 = ox(rng);
            for (int y = y0; y < y0 + side && y < x.h; ++y)
                for (int xx = x0; xx < x0 + side && xx < x.w; ++xx)
                    for (int c = 0; c < x.c; ++c) px(out, y, xx, c) = 0.0;
        }
        return out;
    }
};

}  // namespace deferkit
