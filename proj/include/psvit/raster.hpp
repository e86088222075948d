#pragma once

// World-to-pixel rendering. Frames are [C,H,W] float in [0,1], composited by
// per-channel max so overlapping shapes occlude cleanly. Edges get one pixel
// of coverage antialiasing: coverage = clamp(edge_distance + 0.5, 0, 1).
//
// Conventions that the centroid metrics rely on:
//  - pixel (row r, col c) samples the point (c, r) in pixel coordinates
//  - world (x, y) with y up maps to col = x*(W-1), row = (1-y)*(H-1)
//  - a disk centered exactly on a pixel therefore has that pixel index as its
//    intensity centroid

#include <cstdint>
#include <vector>

#include "psvit/sim.hpp"

namespace psvit::raster {

struct Frame {
    int channels = 3, height = 0, width = 0;
    std::vector<float> data;  // [C,H,W]

    Frame() = default;
    Frame(int c, int h, int w) : channels(c), height(h), width(w) {
        data.assign(size_t(c) * h * w, 0.0f);
    }
    float& at(int c, int r, int col) { return data[size_t((c * height + r) * width + col)]; }
    float at(int c, int r, int col) const { return data[size_t((c * height + r) * width + col)]; }
};

// center and radius in pixel coordinates
void draw_disk_px(Frame& f, double cx, double cy, double radius_px, const float color[3]);
void draw_segment_px(Frame& f, double x0, double y0, double x1, double y1, double half_width_px,
                     const float color[3]);

// Renders one world frame (disks plus static and per-frame strokes).
// World radii get a floor of 2.6 px so objects stay segmentable at small
// resolutions.
Frame render(const sim::WorldFrame& wf, const std::vector<sim::Stroke>& furniture, int height,
             int width);

// Sequence -> [T,C,H,W] float buffer.
std::vector<float> render_sequence(const sim::Sequence& seq, int height, int width);

}  // namespace psvit::raster
