#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace indigo {

/// One labeled image. Pixels are stored quantized to 8 bits; pixel()
/// returns the value in [0, 1]. caption holds token ids when the sample is
/// part of an image-text pretraining pair, otherwise it is empty.
struct ImageSample {
    int height = 0, width = 0, channels = 0;
    std::vector<std::uint8_t> pixels; // row-major H x W x C
    int class_id = 0;
    int domain_id = 0;
    std::vector<int> caption;

    double pixel(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0;
    }
};

struct DomainDataset {
    std::vector<ImageSample> samples;
    std::vector<std::string> class_names;
    std::vector<std::string> domain_names;

    int n_classes() const { return static_cast<int>(class_names.size()); }
    int n_domains() const { return static_cast<int>(domain_names.size()); }

    std::vector<int> indices_of_domain(int domain_id) const;
};

/// Fixed word-to-id tokenizer over the caption template vocabulary.
struct Vocab {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> ids;

    static Vocab build(const std::vector<std::string>& class_names,
                       const std::vector<std::string>& domain_names);
    int require(const std::string& word) const;
    int size() const { return static_cast<int>(words.size()); }
};

/// "a photo of <class> in <domain-style>" -- pretraining caption.
std::vector<int> caption_token_ids(const Vocab& vocab, const std::string& class_name,
                                   const std::string& domain_name);

/// "a photo of <class>" -- classification prompt.
std::vector<int> prompt_token_ids(const Vocab& vocab, const std::string& class_name);

struct SynthConfig {
    int classes = 8;
    int domains = 4;
    int per_cell = 60; // samples per (class, domain)
    int image_size = 16;
    int channels = 3;
    std::uint64_t seed = 0;
    bool with_captions = false;
};

std::vector<std::string> default_class_names(int n);
std::vector<std::string> default_domain_names(int n);

/// Synthetic multi-domain dataset: class identity is a glyph (shape), domain
/// identity a style transform (colors, texture, stroke thickness) layered on
/// top. Fully seeded; identical config yields identical bytes.
DomainDataset synth_multidomain_dataset(const SynthConfig& cfg);

// --- disk layout: root/<domain>/<class>/img_NNNN.ppm + manifest.json ---
void write_dataset(const DomainDataset& ds, const std::string& root);
DomainDataset load_dataset(const std::string& root);

void write_ppm(const std::string& path, const ImageSample& img);
ImageSample read_ppm(const std::string& path);

} // namespace indigo
