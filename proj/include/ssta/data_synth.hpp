#pragma once

#include <string>
#include <vector>

#include "ssta/detr.hpp"

namespace ssta {

// Scene layout: colored shapes on a dark background. Categories: circle = 1,
// square = 2, triangle = 3.
struct SceneSpec {
    int width = 64;
    int height = 64;
    int min_objects = 1;
    int max_objects = 5;
    double min_size = 12.0;  // full extent in pixels
    double max_size = 22.0;
    double min_separation = 12.0;  // between object centers
    std::uint64_t seed = 0;
};

// Fog-like corruption: Gaussian blur, blend toward white, clipped Gaussian
// noise. Annotations are unaffected.
struct DomainShiftSpec {
    double blur_sigma = 0.0;
    double haze = 0.0;  // in [0,1]; 1 = all white
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

DomainShiftSpec fog_preset(std::uint64_t seed);

struct AnnotatedObject {
    std::array<double, 4> bbox;  // normalized (cx, cy, w, h)
    int category = 1;
};

struct AnnotationRecord {
    std::string id;
    int width = 0;
    int height = 0;
    std::vector<AnnotatedObject> objects;
};

struct Scene {
    ImageTensor image;
    AnnotationRecord annotation;
};

// Pure function of (spec.seed, index); the image is quantized to the 8-bit
// grid so container round-trips are lossless.
Scene generate_scene(const SceneSpec& spec, int index);

ImageTensor apply_domain_shift(const ImageTensor& image, const DomainShiftSpec& spec);

// Separable Gaussian blur with replicated borders (exposed for testing).
ImageTensor gaussian_blur(const ImageTensor& image, double sigma);

void write_ppm(const std::string& path, const ImageTensor& image);
ImageTensor read_ppm(const std::string& path);

struct Dataset {
    std::vector<ImageTensor> images;
    std::vector<AnnotationRecord> annotations;
    std::size_t size() const { return annotations.size(); }
};

// Layout under `dir`: images/<id>.ppm plus annotations.jsonl.
void write_dataset(const std::string& dir, const std::vector<Scene>& scenes);
Dataset read_dataset(const std::string& dir);

GroundTruthSet ground_truth_from(const AnnotationRecord& record);

// Generates <root>/{source,target}/{train,val}: the target split applies the
// shift to the same scenes, so annotations match pairwise.
void generate_dataset_tree(const std::string& root, int num_train, int num_val, const SceneSpec& scene_spec,
                           const DomainShiftSpec& shift, int threads = 1);

}  // namespace ssta
