#include "psvit/raster.hpp"

#include <algorithm>
#include <cmath>

namespace psvit::raster {

namespace {

inline void blend_max(Frame& f, int r, int c, double coverage, const float color[3]) {
    if (coverage <= 0) return;
    float cov = float(std::min(coverage, 1.0));
    for (int ch = 0; ch < f.channels; ++ch) {
        float v = color[ch % 3] * cov;
        float& dst = f.at(ch, r, c);
        if (v > dst) dst = v;
    }
}

}  // namespace

void draw_disk_px(Frame& f, double cx, double cy, double radius_px, const float color[3]) {
    int r0 = std::max(0, int(std::floor(cy - radius_px - 1)));
    int r1 = std::min(f.height - 1, int(std::ceil(cy + radius_px + 1)));
    int c0 = std::max(0, int(std::floor(cx - radius_px - 1)));
    int c1 = std::min(f.width - 1, int(std::ceil(cx + radius_px + 1)));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double d = std::hypot(c - cx, r - cy);
            blend_max(f, r, c, radius_px + 0.5 - d, color);
        }
}

void draw_segment_px(Frame& f, double x0, double y0, double x1, double y1, double half_width_px,
                     const float color[3]) {
    double lo_x = std::min(x0, x1) - half_width_px - 1, hi_x = std::max(x0, x1) + half_width_px + 1;
    double lo_y = std::min(y0, y1) - half_width_px - 1, hi_y = std::max(y0, y1) + half_width_px + 1;
    int r0 = std::max(0, int(std::floor(lo_y)));
    int r1 = std::min(f.height - 1, int(std::ceil(hi_y)));
    int c0 = std::max(0, int(std::floor(lo_x)));
    int c1 = std::min(f.width - 1, int(std::ceil(hi_x)));
    double dx = x1 - x0, dy = y1 - y0;
    double len2 = dx * dx + dy * dy;
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double t = len2 > 0 ? ((c - x0) * dx + (r - y0) * dy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            double d = std::hypot(c - (x0 + t * dx), r - (y0 + t * dy));
            blend_max(f, r, c, half_width_px + 0.5 - d, color);
        }
}

Frame render(const sim::WorldFrame& wf, const std::vector<sim::Stroke>& furniture, int height,
             int width) {
    Frame f(3, height, width);
    auto to_col = [width](double x) { return x * (width - 1); };
    auto to_row = [height](double y) { return (1.0 - y) * (height - 1); };
    auto draw_stroke = [&](const sim::Stroke& s) {
        for (size_t i = 0; i + 1 < s.pts.size(); ++i)
            draw_segment_px(f, to_col(s.pts[i][0]), to_row(s.pts[i][1]), to_col(s.pts[i + 1][0]),
                            to_row(s.pts[i + 1][1]), s.half_width_px, s.color);
    };
    for (const auto& s : furniture) draw_stroke(s);
    for (const auto& s : wf.strokes) draw_stroke(s);
    for (const auto& d : wf.disks) {
        double rpx = std::max(2.6, d.r * std::min(height, width));
        draw_disk_px(f, to_col(d.x), to_row(d.y), rpx, d.color);
    }
    for (auto& v : f.data) v = std::clamp(v, 0.0f, 1.0f);
    return f;
}

std::vector<float> render_sequence(const sim::Sequence& seq, int height, int width) {
    std::vector<float> out;
    out.reserve(seq.frames.size() * 3u * size_t(height) * size_t(width));
    for (const auto& wf : seq.frames) {
        Frame f = render(wf, seq.furniture, height, width);
        out.insert(out.end(), f.data.begin(), f.data.end());
    }
    return out;
}

}  // namespace psvit::raster
