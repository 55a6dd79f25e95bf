#include "indigo/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "indigo/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace indigo {

std::vector<int> DomainDataset::indices_of_domain(int domain_id) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].domain_id == domain_id) out.push_back(static_cast<int>(i));
    return out;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Vocab Vocab::build(const std::vector<std::string>& class_names,
                   const std::vector<std::string>& domain_names) {
    Vocab v;
    auto push = [&](const std::string& w) {
        if (!v.ids.count(w)) {
            v.ids.emplace(w, static_cast<int>(v.words.size()));
            v.words.push_back(w);
        }
    };
    for (const char* w : {"a", "photo", "of", "in"}) push(w);
    for (const auto& w : class_names) push(w);
    for (const auto& w : domain_names) push(w);
    return v;
}

int Vocab::require(const std::string& word) const {
    auto it = ids.find(word);
    if (it == ids.end()) throw std::invalid_argument("unknown token: " + word);
    return it->second;
}

std::vector<int> caption_token_ids(const Vocab& vocab, const std::string& class_name,
                                   const std::string& domain_name) {
    return {vocab.require("a"), vocab.require("photo"), vocab.require("of"),
            vocab.require(class_name), vocab.require("in"), vocab.require(domain_name)};
}

std::vector<int> prompt_token_ids(const Vocab& vocab, const std::string& class_name) {
    return {vocab.require("a"), vocab.require("photo"), vocab.require("of"),
            vocab.require(class_name)};
}

// ---------------------------------------------------------------------------
// Glyphs (class identity, domain-invariant)
// ---------------------------------------------------------------------------

namespace {

const char* kGlyphNames[12] = {"square", "disc",    "cross",  "saltire", "rings",   "bars",
                               "pillars", "diamond", "wedge",  "frame",   "dots",    "stripes"};

const char* kDomainNames[4] = {"print", "neon", "paint", "sketch"};

// Primitive glyph mask on an s x s grid, centered at (cy, cx), radius r.
void draw_primitive(std::vector<double>& mask, int s, int prim, double cy, double cx, double r) {
    auto at = [&](int y, int x) -> double& { return mask[static_cast<std::size_t>(y) * s + x]; };
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double ay = std::abs(dy), ax = std::abs(dx);
            bool on = false;
            switch (prim) {
                case 0: on = ay <= r && ax <= r; break;                                     // square
                case 1: on = dy * dy + dx * dx <= r * r; break;                             // disc
                case 2: on = (ax <= r * 0.35 && ay <= r) || (ay <= r * 0.35 && ax <= r); break;
                case 3: on = std::abs(ay - ax) <= r * 0.4 && ay <= r && ax <= r; break;     // saltire
                case 4: {                                                                   // rings
                    const double d = std::sqrt(dy * dy + dx * dx);
                    on = d <= r && d >= r * 0.55;
                    break;
                }
                case 5: on = ax <= r && (std::abs(ay - r * 0.55) <= r * 0.25); break;       // bars
                case 6: on = ay <= r && (std::abs(ax - r * 0.55) <= r * 0.25); break;       // pillars
                case 7: on = ay + ax <= r; break;                                           // diamond
                case 8: on = dy >= -r && dy <= r && ax <= (dy + r) * 0.5; break;            // wedge
                case 9: on = ay <= r && ax <= r && (ay >= r * 0.6 || ax >= r * 0.6); break; // frame
                case 10: on = (std::abs(ay - r * 0.5) <= r * 0.28 && std::abs(ax - r * 0.5) <= r * 0.28); break;
                case 11: on = ay <= r && ax <= r && (static_cast<int>(std::floor(dy + dx + 2 * s)) % 3 == 0); break;
                default: break;
            }
            if (on) at(y, x) = 1.0;
        }
    }
}

std::vector<double> glyph_mask(int class_id, int s, Rng& rng) {
    std::vector<double> mask(static_cast<std::size_t>(s) * s, 0.0);
    const double jitter = s / 8.0;
    const double cy = s / 2.0 - 0.5 + rng.uniform(-jitter, jitter);
    const double cx = s / 2.0 - 0.5 + rng.uniform(-jitter, jitter);
    const double r = s * rng.uniform(0.28, 0.36);
    draw_primitive(mask, s, class_id % 12, cy, cx, r);
    if (class_id >= 12) {
        // higher class ids overlay a second, smaller primitive in a corner
        const int second = (class_id / 12) % 12;
        draw_primitive(mask, s, second, s * 0.2, s * 0.2, s * 0.12);
    }
    return mask;
}

void dilate(std::vector<double>& mask, int s) {
    std::vector<double> out = mask;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            if (mask[static_cast<std::size_t>(y) * s + x] < 0.5) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny >= 0 && ny < s && nx >= 0 && nx < s)
                        out[static_cast<std::size_t>(ny) * s + nx] = 1.0;
                }
        }
    mask = std::move(out);
}

void erode(std::vector<double>& mask, int s) {
    std::vector<double> out = mask;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            bool keep = mask[static_cast<std::size_t>(y) * s + x] >= 0.5;
            for (int dy = -1; dy <= 1 && keep; ++dy)
                for (int dx = -1; dx <= 1 && keep; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= s || nx < 0 || nx >= s ||
                        mask[static_cast<std::size_t>(ny) * s + nx] < 0.5)
                        keep = false;
                }
            out[static_cast<std::size_t>(y) * s + x] = keep ? 1.0 : 0.0;
        }
    mask = std::move(out);
}

// Domain style: colors, stroke thickness, background texture and a channel
// permutation. The four presets are deliberately far apart so that a model
// trained on three of them sees genuinely novel statistics on the fourth.
struct DomainStyle {
    double bg[3];
    double fg[3];
    double noise;
    int thicken;      // -1 erode, 0 none, +1 dilate
    int texture;      // 0 none, 1 scanlines, 2 blotches, 3 hatch
    double tex_amp;
    int perm;         // channel permutation index (0..5)
};

DomainStyle domain_style(int domain_id, std::uint64_t seed) {
    static const DomainStyle presets[4] = {
        {{0.92, 0.92, 0.88}, {0.08, 0.10, 0.12}, 0.03, 0, 0, 0.00, 0}, // print
        {{0.04, 0.02, 0.10}, {0.95, 0.20, 0.85}, 0.06, 1, 1, 0.15, 1}, // neon
        {{0.75, 0.55, 0.30}, {0.10, 0.35, 0.75}, 0.10, 1, 2, 0.20, 2}, // paint
        {{0.97, 0.97, 0.97}, {0.45, 0.45, 0.45}, 0.04, -1, 3, 0.08, 3}, // sketch
    };
    if (domain_id < 4) return presets[domain_id];
    // procedural styles for D > 4
    Rng rng(fold_seed(seed, 0x5717EULL, static_cast<std::uint64_t>(domain_id)));
    DomainStyle st{};
    for (int c = 0; c < 3; ++c) {
        st.bg[c] = rng.uniform(0.0, 1.0);
        st.fg[c] = std::fmod(st.bg[c] + 0.5 + rng.uniform(-0.15, 0.15), 1.0);
    }
    st.noise = rng.uniform(0.02, 0.1);
    st.thicken = rng.range_int(-1, 2);
    st.texture = rng.range_int(0, 4);
    st.tex_amp = rng.uniform(0.05, 0.2);
    st.perm = rng.range_int(0, 6);
    return st;
}

double texture_value(int texture, int y, int x) {
    switch (texture) {
        case 1: return (x % 2 == 0) ? 1.0 : -1.0;
        case 2: return std::sin(y * 1.3) * std::cos(x * 1.7);
        case 3: return (y % 2 == 0) ? 1.0 : -1.0;
        default: return 0.0;
    }
}

void apply_channel_perm(double rgb[3], int perm) {
    static const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    const double r = rgb[perms[perm][0]], g = rgb[perms[perm][1]], b = rgb[perms[perm][2]];
    rgb[0] = r;
    rgb[1] = g;
    rgb[2] = b;
}

ImageSample render_sample(int class_id, int domain_id, int index, const SynthConfig& cfg) {
    const int s = cfg.image_size;
    Rng rng(fold_seed(cfg.seed, fold_seed(static_cast<std::uint64_t>(class_id) * 1000003ULL +
                                              static_cast<std::uint64_t>(domain_id),
                                          static_cast<std::uint64_t>(index))));
    auto mask = glyph_mask(class_id, s, rng);
    const DomainStyle st = domain_style(domain_id, cfg.seed);
    if (st.thicken > 0) dilate(mask, s);
    if (st.thicken < 0) erode(mask, s);

    // small per-sample color jitter on top of the domain palette
    double bg[3], fg[3];
    for (int c = 0; c < 3; ++c) {
        bg[c] = st.bg[c] + rng.uniform(-0.05, 0.05);
        fg[c] = st.fg[c] + rng.uniform(-0.05, 0.05);
    }

    ImageSample img;
    img.height = s;
    img.width = s;
    img.channels = cfg.channels;
    img.class_id = class_id;
    img.domain_id = domain_id;
    img.pixels.resize(static_cast<std::size_t>(s) * s * cfg.channels);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double m = mask[static_cast<std::size_t>(y) * s + x];
            double rgb[3];
            for (int c = 0; c < 3; ++c) {
                double v = bg[c] * (1.0 - m) + fg[c] * m;
                v += st.tex_amp * texture_value(st.texture, y, x) * (1.0 - m);
                v += rng.uniform(-st.noise, st.noise);
                rgb[c] = v;
            }
            apply_channel_perm(rgb, st.perm);
            for (int c = 0; c < cfg.channels; ++c) {
                const double v = std::clamp(rgb[c % 3], 0.0, 1.0);
                img.pixels[(static_cast<std::size_t>(y) * s + x) * cfg.channels + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return img;
}

} // namespace

std::vector<std::string> default_class_names(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
        if (i < 12) out.emplace_back(kGlyphNames[i]);
        else out.push_back("glyph" + std::to_string(i));
    }
    return out;
}

std::vector<std::string> default_domain_names(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
        if (i < 4) out.emplace_back(kDomainNames[i]);
        else out.push_back("style" + std::to_string(i));
    }
    return out;
}

DomainDataset synth_multidomain_dataset(const SynthConfig& cfg) {
    if (cfg.classes < 3 || cfg.domains < 3)
        throw std::invalid_argument("synthetic dataset needs at least 3 classes and 3 domains");
    if (cfg.image_size < 8) throw std::invalid_argument("image size too small for patching");
    DomainDataset ds;
    ds.class_names = default_class_names(cfg.classes);
    ds.domain_names = default_domain_names(cfg.domains);
    const Vocab vocab = Vocab::build(ds.class_names, ds.domain_names);
    ds.samples.reserve(static_cast<std::size_t>(cfg.classes) * cfg.domains * cfg.per_cell);
    for (int d = 0; d < cfg.domains; ++d)
        for (int c = 0; c < cfg.classes; ++c)
            for (int i = 0; i < cfg.per_cell; ++i) {
                ImageSample img = render_sample(c, d, i, cfg);
                if (cfg.with_captions)
                    img.caption = caption_token_ids(vocab, ds.class_names[c], ds.domain_names[d]);
                ds.samples.push_back(std::move(img));
            }
    return ds;
}

// ---------------------------------------------------------------------------
// Disk I/O
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const ImageSample& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src = c < img.channels ? c : img.channels - 1;
                f.put(static_cast<char>(
                    img.pixels[(static_cast<std::size_t>(y) * img.width + x) * img.channels + src]));
            }
}

ImageSample read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw std::runtime_error("unsupported ppm: " + path);
    f.get(); // single whitespace after header
    ImageSample img;
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw std::runtime_error("truncated ppm: " + path);
    return img;
}

void write_dataset(const DomainDataset& ds, const std::string& root) {
    fs::create_directories(root);
    json manifest;
    manifest["class_names"] = ds.class_names;
    manifest["domain_names"] = ds.domain_names;
    manifest["samples"] = json::array();
    std::vector<int> counter(static_cast<std::size_t>(ds.n_domains()) * ds.n_classes(), 0);
    for (const auto& s : ds.samples) {
        const std::string dir =
            ds.domain_names.at(s.domain_id) + "/" + ds.class_names.at(s.class_id);
        fs::create_directories(fs::path(root) / dir);
        int& k = counter[static_cast<std::size_t>(s.domain_id) * ds.n_classes() + s.class_id];
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d.ppm", k++);
        const std::string rel = dir + "/" + name;
        write_ppm((fs::path(root) / rel).string(), s);
        manifest["samples"].push_back(
            {{"path", rel}, {"class", s.class_id}, {"domain", s.domain_id}});
    }
    std::ofstream mf(fs::path(root) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

DomainDataset load_dataset(const std::string& root) {
    std::ifstream mf(fs::path(root) / "manifest.json");
    if (!mf) throw std::runtime_error("missing manifest.json under " + root);
    json manifest = json::parse(mf);
    DomainDataset ds;
    ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    ds.domain_names = manifest.at("domain_names").get<std::vector<std::string>>();
    for (const auto& rec : manifest.at("samples")) {
        ImageSample img = read_ppm((fs::path(root) / rec.at("path").get<std::string>()).string());
        img.class_id = rec.at("class").get<int>();
        img.domain_id = rec.at("domain").get<int>();
        if (img.class_id < 0 || img.class_id >= ds.n_classes() || img.domain_id < 0 ||
            img.domain_id >= ds.n_domains())
            throw std::runtime_error("manifest entry out of range: " + rec.dump());
        ds.samples.push_back(std::move(img));
    }
    return ds;
}

} // namespace indigo
