#include "hierprobe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hierprobe/util.hpp"

namespace hierprobe {

void HierarchySpec::validate() const {
    if (superclass_names.empty() || fine_names.empty())
        throw ContractError("hierarchy needs at least one superclass and one fine class");
    if (fine_to_coarse.size() != fine_names.size())
        throw ContractError("fine->coarse map size does not match fine class count");
    std::vector<bool> hit(superclass_names.size(), false);
    for (int c : fine_to_coarse) {
        if (c < 0 || c >= num_superclasses())
            throw ContractError("fine->coarse map entry " + std::to_string(c) + " out of range");
        hit[static_cast<std::size_t>(c)] = true;
    }
    for (std::size_t s = 0; s < hit.size(); ++s)
        if (!hit[s])
            throw ContractError("superclass " + superclass_names[s] + " has no fine classes");
}

void HierarchicalDataset::append(int fine, int coarse, const double* px) {
    fine_labels.push_back(fine);
    coarse_labels.push_back(coarse);
    pixels.insert(pixels.end(), px, px + pixels_per_record());
}

void HierarchicalDataset::validate() const {
    hierarchy.validate();
    if (channels < 1 || height < 1 || width < 1)
        throw ContractError("dataset needs positive image dims");
    if (coarse_labels.size() != fine_labels.size() ||
        pixels.size() != fine_labels.size() * pixels_per_record())
        throw ContractError("dataset arrays are inconsistently sized");
    for (std::size_t i = 0; i < fine_labels.size(); ++i) {
        const int f = fine_labels[i];
        if (f < 0 || f >= hierarchy.num_fine())
            throw ContractError("record " + std::to_string(i) + ": fine label out of range");
        if (coarse_labels[i] != hierarchy.fine_to_coarse[static_cast<std::size_t>(f)])
            throw ContractError("record " + std::to_string(i) +
                                ": coarse label does not match hierarchy map");
    }
    for (double p : pixels)
        if (!(p >= 0.0 && p <= 1.0))
            throw ContractError("pixel value outside [0, 1]");
}

Tensor HierarchicalDataset::batch(const std::vector<int>& indices) const {
    const int n = static_cast<int>(indices.size());
    const std::size_t ppr = pixels_per_record();
    Tensor t = Tensor::zeros({n, channels, height, width});
    auto out = t.mutable_data();
    for (int r = 0; r < n; ++r)
        std::copy_n(pixels.data() + static_cast<std::size_t>(indices[static_cast<std::size_t>(r)]) * ppr,
                    ppr, out.data() + static_cast<std::size_t>(r) * ppr);
    return t;
}

std::vector<int> HierarchicalDataset::batch_fine(const std::vector<int>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(fine_labels[static_cast<std::size_t>(i)]);
    return out;
}

std::vector<int> HierarchicalDataset::batch_coarse(const std::vector<int>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(coarse_labels[static_cast<std::size_t>(i)]);
    return out;
}

void SyntheticSpec::validate() const {
    if (superclasses < 1 || subclasses_per_super < 1)
        throw ContractError("synthetic spec needs positive class counts");
    if (train_per_sub < 1 || test_per_sub < 0)
        throw ContractError("synthetic spec needs at least one training example per subclass");
    if (latent_dim < 1) throw ContractError("synthetic latent dim must be positive");
    if (!(sigma_super > sigma_sub && sigma_sub > 0.0))
        throw ContractError("synthetic spec needs sigma_super > sigma_sub > 0");
    if (sigma_noise < 0.0) throw ContractError("synthetic noise sigma must be >= 0");
    if (channels < 1 || height < 1 || width < 1)
        throw ContractError("synthetic spec needs positive image dims");
}

DatasetPair synthesize(const SyntheticSpec& spec) {
    spec.validate();
    const int S = spec.superclasses, B = spec.subclasses_per_super, L = spec.latent_dim;
    const std::size_t D = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;

    Rng rng(split_seed(spec.seed, 1));
    std::vector<double> super_means(static_cast<std::size_t>(S) * L);
    for (auto& v : super_means) v = rng.normal(0.0, spec.sigma_super);
    std::vector<double> sub_means(static_cast<std::size_t>(S) * B * L);
    for (int s = 0; s < S; ++s)
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                sub_means[(static_cast<std::size_t>(s) * B + b) * L + l] =
                    super_means[static_cast<std::size_t>(s) * L + l] + rng.normal(0.0, spec.sigma_sub);

    const int total = S * B * (spec.train_per_sub + spec.test_per_sub);
    std::vector<double> latents(static_cast<std::size_t>(total) * L);
    std::vector<int> fine_of(static_cast<std::size_t>(total));
    std::vector<bool> is_train(static_cast<std::size_t>(total));
    std::size_t r = 0;
    for (int s = 0; s < S; ++s)
        for (int b = 0; b < B; ++b) {
            const int fine = s * B + b;
            for (int e = 0; e < spec.train_per_sub + spec.test_per_sub; ++e, ++r) {
                fine_of[r] = fine;
                is_train[r] = e < spec.train_per_sub;
                for (int l = 0; l < L; ++l)
                    latents[r * static_cast<std::size_t>(L) + l] =
                        sub_means[static_cast<std::size_t>(fine) * L + l] +
                        rng.normal(0.0, spec.sigma_noise);
            }
        }

    // fixed seeded linear map latent -> pixels
    Rng map_rng(split_seed(spec.seed, 2));
    std::vector<double> map(D * static_cast<std::size_t>(L));
    const double map_scale = 1.0 / std::sqrt(static_cast<double>(L));
    for (auto& v : map) v = map_rng.normal(0.0, map_scale);

    std::vector<double> images(static_cast<std::size_t>(total) * D);
    for (int i = 0; i < total; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            double acc = 0.0;
            for (int l = 0; l < L; ++l)
                acc += map[d * static_cast<std::size_t>(L) + l] *
                       latents[static_cast<std::size_t>(i) * L + l];
            images[static_cast<std::size_t>(i) * D + d] = acc;
        }

    double lo = images[0], hi = images[0];
    for (double v : images) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) throw NumericError("degenerate synthetic images: constant pixel values");
    const double inv = 1.0 / (hi - lo);
    for (auto& v : images) v = (v - lo) * inv;

    HierarchySpec hier;
    for (int s = 0; s < S; ++s) hier.superclass_names.push_back("super" + std::to_string(s));
    for (int s = 0; s < S; ++s)
        for (int b = 0; b < B; ++b) {
            hier.fine_names.push_back("super" + std::to_string(s) + ".sub" + std::to_string(b));
            hier.fine_to_coarse.push_back(s);
        }

    DatasetPair out;
    for (HierarchicalDataset* ds : {&out.train, &out.test}) {
        ds->hierarchy = hier;
        ds->channels = spec.channels;
        ds->height = spec.height;
        ds->width = spec.width;
    }
    out.train.split = "train";
    out.test.split = "test";
    for (int i = 0; i < total; ++i) {
        HierarchicalDataset& ds = is_train[static_cast<std::size_t>(i)] ? out.train : out.test;
        const int fine = fine_of[static_cast<std::size_t>(i)];
        ds.append(fine, hier.fine_to_coarse[static_cast<std::size_t>(fine)],
                  images.data() + static_cast<std::size_t>(i) * D);
    }
    out.train.validate();
    out.test.validate();
    return out;
}

namespace {

HierarchicalDataset apply_split(const HierarchicalDataset& src, const std::vector<int>& keep_fine,
                                const HierarchySpec& new_hier, const std::vector<int>& remap) {
    HierarchicalDataset out;
    out.hierarchy = new_hier;
    out.channels = src.channels;
    out.height = src.height;
    out.width = src.width;
    out.split = src.split;
    std::vector<bool> keep(static_cast<std::size_t>(src.hierarchy.num_fine()), false);
    for (int f : keep_fine) keep[static_cast<std::size_t>(f)] = true;
    const std::size_t ppr = src.pixels_per_record();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const int f = src.fine_labels[i];
        if (!keep[static_cast<std::size_t>(f)]) continue;
        const int nf = remap[static_cast<std::size_t>(f)];
        out.append(nf, new_hier.fine_to_coarse[static_cast<std::size_t>(nf)],
                   src.pixels.data() + i * ppr);
    }
    out.validate();
    return out;
}

} // namespace

std::tuple<DatasetPair, DatasetPair, SubpopulationSplit>
subpopulation_split(const DatasetPair& data, int source_per_super, std::uint64_t seed) {
    const HierarchySpec& hier = data.train.hierarchy;
    hier.validate();
    const int S = hier.num_superclasses();

    std::vector<std::vector<int>> members(static_cast<std::size_t>(S));
    for (int f = 0; f < hier.num_fine(); ++f)
        members[static_cast<std::size_t>(hier.fine_to_coarse[static_cast<std::size_t>(f)])].push_back(f);

    SubpopulationSplit split;
    split.seed = seed;
    Rng rng(split_seed(seed, 7));
    for (int s = 0; s < S; ++s) {
        auto& m = members[static_cast<std::size_t>(s)];
        if (source_per_super < 1 || source_per_super >= static_cast<int>(m.size()))
            throw ContractError("superclass " + hier.superclass_names[static_cast<std::size_t>(s)] +
                                " has " + std::to_string(m.size()) +
                                " subclasses; cannot take " + std::to_string(source_per_super) +
                                " for source and leave a non-empty target");
        std::vector<int> pool = m;
        rng.shuffle(pool);
        std::vector<int> src(pool.begin(), pool.begin() + source_per_super);
        std::vector<int> tgt(pool.begin() + source_per_super, pool.end());
        std::sort(src.begin(), src.end());
        std::sort(tgt.begin(), tgt.end());
        split.source_fine_per_super.push_back(std::move(src));
        split.target_fine_per_super.push_back(std::move(tgt));
    }

    auto build_side = [&](const std::vector<std::vector<int>>& per_super) {
        HierarchySpec h;
        h.superclass_names = hier.superclass_names;
        std::vector<int> remap(static_cast<std::size_t>(hier.num_fine()), -1);
        std::vector<int> kept;
        for (int s = 0; s < S; ++s)
            for (int f : per_super[static_cast<std::size_t>(s)]) {
                remap[static_cast<std::size_t>(f)] = static_cast<int>(h.fine_names.size());
                h.fine_names.push_back(hier.fine_names[static_cast<std::size_t>(f)]);
                h.fine_to_coarse.push_back(s);
                kept.push_back(f);
            }
        return std::tuple{h, remap, kept};
    };

    auto [src_hier, src_remap, src_kept] = build_side(split.source_fine_per_super);
    auto [tgt_hier, tgt_remap, tgt_kept] = build_side(split.target_fine_per_super);

    DatasetPair source{apply_split(data.train, src_kept, src_hier, src_remap),
                       apply_split(data.test, src_kept, src_hier, src_remap)};
    DatasetPair target{apply_split(data.train, tgt_kept, tgt_hier, tgt_remap),
                       apply_split(data.test, tgt_kept, tgt_hier, tgt_remap)};
    return {std::move(source), std::move(target), std::move(split)};
}

std::vector<std::vector<int>> make_batches(std::size_t n, int batch_size, Rng& rng) {
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(n, i + static_cast<std::size_t>(batch_size))));
    return batches;
}

// ---- binary format ----

namespace {

constexpr char kDatasetMagic[4] = {'H', 'P', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
void put_name(std::ostream& os, const std::string& s) {
    put_u16(os, static_cast<std::uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
    std::istream& is;
    std::size_t offset = 0;
    std::string where;

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(where + ": " + what + " at byte " + std::to_string(offset));
    }
    void read_bytes(void* dst, std::size_t n) {
        is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (is.gcount() != static_cast<std::streamsize>(n)) fail("truncated file");
        offset += n;
    }
    std::uint16_t u16() {
        unsigned char b[2];
        read_bytes(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        unsigned char b[4];
        read_bytes(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::string name() {
        const std::uint16_t len = u16();
        std::string s(len, '\0');
        read_bytes(s.data(), len);
        return s;
    }
};

void serialize_dataset(const HierarchicalDataset& data, std::ostream& os) {
    os.write(kDatasetMagic, 4);
    put_u32(os, kDatasetVersion);
    put_u16(os, static_cast<std::uint16_t>(data.hierarchy.num_superclasses()));
    for (const auto& n : data.hierarchy.superclass_names) put_name(os, n);
    put_u16(os, static_cast<std::uint16_t>(data.hierarchy.num_fine()));
    for (const auto& n : data.hierarchy.fine_names) put_name(os, n);
    for (int c : data.hierarchy.fine_to_coarse) put_u16(os, static_cast<std::uint16_t>(c));
    put_u32(os, static_cast<std::uint32_t>(data.size()));
    const std::size_t ppr = data.pixels_per_record();
    for (std::size_t i = 0; i < data.size(); ++i) {
        put_u16(os, static_cast<std::uint16_t>(data.fine_labels[i]));
        put_u16(os, static_cast<std::uint16_t>(data.coarse_labels[i]));
        put_u16(os, static_cast<std::uint16_t>(data.channels));
        put_u16(os, static_cast<std::uint16_t>(data.height));
        put_u16(os, static_cast<std::uint16_t>(data.width));
        os.write(reinterpret_cast<const char*>(data.pixels.data() + i * ppr),
                 static_cast<std::streamsize>(ppr * sizeof(double)));
    }
}

} // namespace

void save_dataset(const HierarchicalDataset& data, const std::filesystem::path& path) {
    data.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    serialize_dataset(data, os);
    if (!os) throw FormatError("write failure on " + path.string());
}

HierarchicalDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    Reader r{is, 0, path.string()};

    char magic[4];
    r.read_bytes(magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw FormatError(path.string() + ": bad dataset magic at byte 0");
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw FormatError(path.string() + ": unsupported dataset schema version " +
                          std::to_string(version));

    HierarchicalDataset out;
    const std::uint16_t n_super = r.u16();
    for (std::uint16_t i = 0; i < n_super; ++i) out.hierarchy.superclass_names.push_back(r.name());
    const std::uint16_t n_fine = r.u16();
    for (std::uint16_t i = 0; i < n_fine; ++i) out.hierarchy.fine_names.push_back(r.name());
    for (std::uint16_t i = 0; i < n_fine; ++i) out.hierarchy.fine_to_coarse.push_back(r.u16());
    try {
        out.hierarchy.validate();
    } catch (const ContractError& e) {
        r.fail(e.what());
    }

    const std::uint32_t n_records = r.u32();
    for (std::uint32_t i = 0; i < n_records; ++i) {
        const std::size_t rec_off = r.offset;
        const int fine = r.u16();
        const int coarse = r.u16();
        const int c = r.u16(), h = r.u16(), w = r.u16();
        if (i == 0) {
            out.channels = c;
            out.height = h;
            out.width = w;
        } else if (c != out.channels || h != out.height || w != out.width) {
            throw FormatError(path.string() + ": record " + std::to_string(i) +
                              " changes image dims at byte " + std::to_string(rec_off));
        }
        if (fine >= n_fine)
            throw FormatError(path.string() + ": record " + std::to_string(i) +
                              " fine label out of range at byte " + std::to_string(rec_off));
        if (coarse != out.hierarchy.fine_to_coarse[static_cast<std::size_t>(fine)])
            throw FormatError(path.string() + ": record " + std::to_string(i) +
                              " coarse label violates hierarchy map at byte " +
                              std::to_string(rec_off));
        std::vector<double> px(static_cast<std::size_t>(c) * h * w);
        r.read_bytes(px.data(), px.size() * sizeof(double));
        for (double p : px)
            if (!(p >= 0.0 && p <= 1.0))
                throw FormatError(path.string() + ": record " + std::to_string(i) +
                                  " pixel outside [0,1] at byte " + std::to_string(rec_off));
        out.append(fine, coarse, px.data());
    }
    is.peek();
    if (!is.eof())
        throw FormatError(path.string() + ": trailing bytes after last record at byte " +
                          std::to_string(r.offset));
    out.validate();
    return out;
}

std::uint64_t dataset_fingerprint(const HierarchicalDataset& data) {
    std::ostringstream os(std::ios::binary);
    serialize_dataset(data, os);
    const std::string s = os.str();
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::uint64_t dataset_fingerprint(const DatasetPair& data) {
    std::ostringstream os(std::ios::binary);
    serialize_dataset(data.train, os);
    serialize_dataset(data.test, os);
    const std::string s = os.str();
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

// ---- converter ----

HierarchySpec load_hierarchy_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path.string());

    HierarchySpec hier;
    std::vector<std::pair<std::string, int>> entries; // name, explicit index or -1
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        // trim
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;

        std::string names_part = line;
        std::string super_name = "super" + std::to_string(hier.superclass_names.size());
        if (const auto colon = line.find(':'); colon != std::string::npos) {
            super_name = trim(line.substr(0, colon));
            names_part = line.substr(colon + 1);
        }
        const int super_idx = static_cast<int>(hier.superclass_names.size());
        hier.superclass_names.push_back(super_name);

        std::istringstream ns(names_part);
        std::string tok;
        bool any = false;
        while (std::getline(ns, tok, ',')) {
            tok = trim(tok);
            if (tok.empty())
                throw FormatError(path.string() + ":" + std::to_string(line_no) +
                                  ": empty fine class name");
            int idx = -1;
            if (const auto eq = tok.find('='); eq != std::string::npos) {
                idx = std::stoi(tok.substr(eq + 1));
                tok = trim(tok.substr(0, eq));
            }
            entries.emplace_back(tok, idx);
            hier.fine_to_coarse.push_back(super_idx); // re-ordered below
            any = true;
        }
        if (!any)
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": superclass line with no fine classes");
    }
    if (entries.empty()) throw FormatError(path.string() + ": empty hierarchy file");

    const bool explicit_idx = entries[0].second >= 0;
    for (const auto& [name, idx] : entries)
        if ((idx >= 0) != explicit_idx)
            throw FormatError(path.string() +
                              ": mix of explicit (name=INDEX) and implicit fine class labels");

    const int n = static_cast<int>(entries.size());
    std::vector<int> order(entries.size());
    if (explicit_idx) {
        std::vector<bool> used(entries.size(), false);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const int idx = entries[i].second;
            if (idx < 0 || idx >= n || used[static_cast<std::size_t>(idx)])
                throw FormatError(path.string() + ": fine class indices must be a permutation of 0.." +
                                  std::to_string(n - 1));
            used[static_cast<std::size_t>(idx)] = true;
            order[i] = idx;
        }
    } else {
        for (std::size_t i = 0; i < entries.size(); ++i) order[i] = static_cast<int>(i);
    }

    HierarchySpec out;
    out.superclass_names = hier.superclass_names;
    out.fine_names.assign(entries.size(), "");
    out.fine_to_coarse.assign(entries.size(), 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        out.fine_names[static_cast<std::size_t>(order[i])] = entries[i].first;
        out.fine_to_coarse[static_cast<std::size_t>(order[i])] = hier.fine_to_coarse[i];
    }
    out.validate();
    return out;
}

HierarchicalDataset convert_raw_dataset(const std::vector<std::filesystem::path>& raw_files,
                                        const HierarchySpec& hierarchy, int channels, int height,
                                        int width) {
    hierarchy.validate();
    HierarchicalDataset out;
    out.hierarchy = hierarchy;
    out.channels = channels;
    out.height = height;
    out.width = width;

    const std::size_t ppr = out.pixels_per_record();
    const std::size_t rec_size = 1 + ppr;
    std::vector<unsigned char> rec(rec_size);
    std::vector<double> px(ppr);

    for (const auto& path : raw_files) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open " + path.string());
        std::size_t offset = 0;
        while (true) {
            is.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec_size));
            const auto got = is.gcount();
            if (got == 0 && is.eof()) break;
            if (got != static_cast<std::streamsize>(rec_size))
                throw FormatError(path.string() + ": truncated record at byte " +
                                  std::to_string(offset));
            const int fine = rec[0];
            if (fine >= hierarchy.num_fine())
                throw FormatError(path.string() + ": label " + std::to_string(fine) +
                                  " exceeds hierarchy fine class count at byte " +
                                  std::to_string(offset));
            for (std::size_t i = 0; i < ppr; ++i) px[i] = rec[1 + i] / 255.0;
            out.append(fine, hierarchy.fine_to_coarse[static_cast<std::size_t>(fine)], px.data());
            offset += rec_size;
        }
    }
    out.validate();
    return out;
}

SyntheticSpec parse_synthetic_spec(const std::string& text) {
    if (text.rfind("synth:", 0) != 0)
        throw UsageError("synthetic spec must start with 'synth:', got '" + text + "'");
    SyntheticSpec spec;
    std::istringstream ts(text.substr(6));
    std::string tok;
    while (std::getline(ts, tok, ',')) {
        if (tok.empty() || tok == "default") continue;
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw UsageError("synthetic spec token '" + tok + "' is not key=value");
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        try {
            if (key == "super") spec.superclasses = std::stoi(val);
            else if (key == "sub") spec.subclasses_per_super = std::stoi(val);
            else if (key == "train") spec.train_per_sub = std::stoi(val);
            else if (key == "test") spec.test_per_sub = std::stoi(val);
            else if (key == "latent") spec.latent_dim = std::stoi(val);
            else if (key == "sigma_super") spec.sigma_super = std::stod(val);
            else if (key == "sigma_sub") spec.sigma_sub = std::stod(val);
            else if (key == "sigma_noise") spec.sigma_noise = std::stod(val);
            else if (key == "channels") spec.channels = std::stoi(val);
            else if (key == "height") spec.height = std::stoi(val);
            else if (key == "width") spec.width = std::stoi(val);
            else if (key == "seed") spec.seed = std::stoull(val);
            else throw UsageError("unknown synthetic spec key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw UsageError("bad value in synthetic spec token '" + tok + "'");
        }
    }
    spec.validate();
    return spec;
}

} // namespace hierprobe
