#include "ssta/data_synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "ssta/common.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ssta {

namespace {

constexpr std::array<std::array<double, 3>, 6> kPalette = {{
    {0.90, 0.12, 0.12},
    {0.10, 0.80, 0.18},
    {0.16, 0.28, 0.92},
    {0.95, 0.85, 0.10},
    {0.85, 0.15, 0.82},
    {0.10, 0.85, 0.85},
}};

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

void quantize_image(ImageTensor& img) {
    for (double& p : img.pixels) p = quantize8(p);
}

struct ShapeInstance {
    int category;  // 1 circle, 2 square, 3 triangle
    double cx, cy, size;
    std::array<double, 3> color;
};

bool inside_shape(const ShapeInstance& s, double px, double py) {
    const double half = s.size / 2.0;
    switch (s.category) {
        case 1: {
            const double dx = px - s.cx;
            const double dy = py - s.cy;
            return dx * dx + dy * dy <= half * half;
        }
        case 2:
            return std::abs(px - s.cx) <= half && std::abs(py - s.cy) <= half;
        case 3: {
            // Upward triangle: apex (cx, cy-half), base corners (cx +- half, cy+half).
            if (py < s.cy - half || py > s.cy + half) return false;
            const double frac = (py - (s.cy - half)) / s.size;  // 0 at apex, 1 at base
            return std::abs(px - s.cx) <= half * frac;
        }
        default:
            return false;
    }
}

std::string format_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

DomainShiftSpec fog_preset(std::uint64_t seed) {
    DomainShiftSpec s;
    s.blur_sigma = 1.1;
    s.haze = 0.55;
    s.noise_std = 0.03;
    s.seed = seed;
    return s;
}

Scene generate_scene(const SceneSpec& spec, int index) {
    Rng rng(hash_combine(spec.seed, static_cast<std::uint64_t>(index) + 0x5ce4eULL));

    Scene scene;
    scene.image = ImageTensor(spec.height, spec.width);
    scene.annotation.id = format_id(index);
    scene.annotation.width = spec.width;
    scene.annotation.height = spec.height;

    const std::array<double, 3> background = {rng.uniform(0.05, 0.30), rng.uniform(0.05, 0.30),
                                              rng.uniform(0.05, 0.30)};
    const int count = rng.uniform_int(spec.min_objects, spec.max_objects);

    std::vector<ShapeInstance> shapes;
    for (int n = 0; n < count; ++n) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            ShapeInstance s;
            s.category = rng.uniform_int(1, 3);
            s.size = rng.uniform(spec.min_size, spec.max_size);
            const double half = s.size / 2.0;
            if (spec.width - half <= half || spec.height - half <= half)
                throw DataError("generate_scene: objects do not fit the image");
            s.cx = rng.uniform(half, spec.width - half);
            s.cy = rng.uniform(half, spec.height - half);
            s.color = kPalette[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kPalette.size()) - 1))];
            bool ok = true;
            for (const auto& other : shapes) {
                const double dx = s.cx - other.cx;
                const double dy = s.cy - other.cy;
                if (std::sqrt(dx * dx + dy * dy) < spec.min_separation) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                shapes.push_back(s);
                placed = true;
            }
        }
        if (!placed)
            throw DataError("generate_scene: could not place object " + std::to_string(n) + " of " +
                            std::to_string(count) + " after 200 attempts (seed " + std::to_string(spec.seed) +
                            ", index " + std::to_string(index) + ")");
    }

    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const double px = x + 0.5;
            const double py = y + 0.5;
            std::array<double, 3> color = background;
            for (const auto& s : shapes)
                if (inside_shape(s, px, py)) color = s.color;  // later shapes occlude
            for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = color[c];
        }
    }
    quantize_image(scene.image);

    for (const auto& s : shapes) {
        AnnotatedObject obj;
        obj.category = s.category;
        obj.bbox = {s.cx / spec.width, s.cy / spec.height, s.size / spec.width, s.size / spec.height};
        scene.annotation.objects.push_back(obj);
    }
    return scene;
}

ImageTensor gaussian_blur(const ImageTensor& image, double sigma) {
    if (sigma <= 0.0) return image;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    const int h = image.height;
    const int w = image.width;
    ImageTensor tmp(h, w);
    ImageTensor out(h, w);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * image.at(c, y, std::clamp(x + i, 0, w - 1));
                tmp.at(c, y, x) = acc;
            }
        }
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * tmp.at(c, std::clamp(y + i, 0, h - 1), x);
                out.at(c, y, x) = acc;
            }
        }
    }
    return out;
}

ImageTensor apply_domain_shift(const ImageTensor& image, const DomainShiftSpec& spec) {
    ImageTensor out = gaussian_blur(image, spec.blur_sigma);
    if (spec.haze > 0.0)
        for (double& p : out.pixels) p = (1.0 - spec.haze) * p + spec.haze;
    if (spec.noise_std > 0.0) {
        // Noise keyed off the spec seed and the image content, so the shift
        // stays a pure function of (seed, image).
        const std::uint64_t content = fnv1a(out.pixels.data(), out.pixels.size() * sizeof(double));
        Rng rng(hash_combine(spec.seed, content));
        for (double& p : out.pixels) p = std::clamp(p + rng.normal() * spec.noise_std, 0.0, 1.0);
    }
    quantize_image(out);
    return out;
}

void write_ppm(const std::string& path, const ImageTensor& image) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_ppm: cannot open " + path);
    f << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(image.width) * 3);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * 255.0));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw DataError("write_ppm: write failed for " + path);
}

ImageTensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw ParseError(path, 0, "expected P6 magic");
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (!f || w <= 0 || h <= 0) throw ParseError(path, static_cast<std::size_t>(f.tellg()), "bad PPM header");
    if (maxval != 255) throw ParseError(path, static_cast<std::size_t>(f.tellg()), "unsupported maxval");
    f.get();  // single whitespace after header
    ImageTensor img(h, w);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) {
            const auto pos = f.tellg();
            throw ParseError(path, pos < 0 ? 0 : static_cast<std::size_t>(pos), "truncated pixel data");
        }
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

namespace {

json annotation_to_json(const AnnotationRecord& rec) {
    json objects = json::array();
    for (const auto& obj : rec.objects)
        objects.push_back({{"bbox", obj.bbox}, {"category", obj.category}});
    return json{{"id", rec.id}, {"width", rec.width}, {"height", rec.height}, {"objects", objects}};
}

AnnotationRecord annotation_from_json(const json& j, const std::string& file, std::size_t offset) {
    try {
        AnnotationRecord rec;
        rec.id = j.at("id").get<std::string>();
        rec.width = j.at("width").get<int>();
        rec.height = j.at("height").get<int>();
        for (const auto& jo : j.at("objects")) {
            AnnotatedObject obj;
            const auto bbox = jo.at("bbox").get<std::vector<double>>();
            if (bbox.size() != 4) throw std::invalid_argument("bbox must have 4 entries");
            std::copy(bbox.begin(), bbox.end(), obj.bbox.begin());
            obj.category = jo.at("category").get<int>();
            for (double v : obj.bbox)
                if (v < 0.0 || v > 1.0) throw std::invalid_argument("bbox out of [0,1]");
            if (obj.category < 1) throw std::invalid_argument("category out of range");
            rec.objects.push_back(obj);
        }
        return rec;
    } catch (const json::exception& e) {
        throw ParseError(file, offset, e.what());
    } catch (const std::invalid_argument& e) {
        throw ParseError(file, offset, e.what());
    }
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<Scene>& scenes) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream ann(fs::path(dir) / "annotations.jsonl");
    if (!ann) throw DataError("write_dataset: cannot open annotations in " + dir);
    for (const auto& scene : scenes) {
        write_ppm((fs::path(dir) / "images" / (scene.annotation.id + ".ppm")).string(), scene.image);
        ann << annotation_to_json(scene.annotation).dump() << "\n";
    }
    if (!ann) throw DataError("write_dataset: annotation write failed in " + dir);
}

Dataset read_dataset(const std::string& dir) {
    const std::string ann_path = (fs::path(dir) / "annotations.jsonl").string();
    std::ifstream ann(ann_path);
    if (!ann) throw DataError("read_dataset: cannot open " + ann_path);

    Dataset ds;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(ann, line)) {
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(ann_path, line_start + e.byte, e.what());
        }
        ds.annotations.push_back(annotation_from_json(j, ann_path, line_start));
    }
    ds.images.reserve(ds.annotations.size());
    for (const auto& rec : ds.annotations)
        ds.images.push_back(read_ppm((fs::path(dir) / "images" / (rec.id + ".ppm")).string()));
    return ds;
}

GroundTruthSet ground_truth_from(const AnnotationRecord& record) {
    GroundTruthSet gt;
    for (const auto& obj : record.objects) gt.objects.push_back({obj.bbox, obj.category});
    return gt;
}

void generate_dataset_tree(const std::string& root, int num_train, int num_val, const SceneSpec& scene_spec,
                           const DomainShiftSpec& shift, int threads) {
    struct Split {
        const char* name;
        int count;
        int index_base;
    };
    const Split splits[] = {{"train", num_train, 0}, {"val", num_val, 1 << 20}};

    for (const auto& split : splits) {
        std::vector<Scene> source(split.count);
        std::vector<Scene> target(split.count);
        const int n_threads = std::max(1, threads);
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int i = next.fetch_add(1); i < split.count; i = next.fetch_add(1)) {
                source[i] = generate_scene(scene_spec, split.index_base + i);
                target[i].image = apply_domain_shift(source[i].image, shift);
                target[i].annotation = source[i].annotation;
            }
        };
        if (n_threads == 1) {
            worker();
        } else {
            for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }
        write_dataset((fs::path(root) / "source" / split.name).string(), source);
        write_dataset((fs::path(root) / "target" / split.name).string(), target);
    }
}

}  // namespace ssta
