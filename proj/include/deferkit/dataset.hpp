#pragma once

// Data model: instances, taxonomy, labeled/unlabeled/test splits, and the
// manifest file format.
//
// Class indices are 1-based in manifest files and 0-based everywhere in
// memory; conversion happens only at load/save. Keep it that way.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "deferkit/common.hpp"

namespace deferkit {

struct Payload {
    Vector data;
    int h = 0, w = 0, c = 0;  // image shape; all zero for plain feature vectors

    bool is_image() const { return h > 0; }
    int dim() const { return int(data.size()); }
};

struct Example {
    std::string id;
    Payload payload;
    std::string payload_ref;  // original manifest payload field, re-emitted on save
    int y = -1;               // ground-truth superclass, 0-based
    int y_sub = -1;           // subclass, 0-based; -1 when the task has no taxonomy
    int h = -1;               // expert prediction, 0-based; -1 when absent
    std::string h_source;     // "", "real" or "artificial"
    int h_bin_hat = -1;       // artificial binary prediction; -1 when absent
    double confidence = -1.0; // expertise-model confidence; <0 when absent
    std::map<std::string, std::string> meta;

    bool has_expert() const { return h >= 0; }
    std::optional<std::string> meta_get(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) return std::nullopt;
        return it->second;
    }
};

/// Subclass -> superclass mapping. k_sub fine classes, k coarse classes.
struct TaxonomyMap {
    std::vector<int> sub_to_super;  // 0-based
    int k = 0;

    int k_sub() const { return int(sub_to_super.size()); }
    int super_of(int sub) const {
        if (sub < 0 || sub >= k_sub()) throw PreconditionError("super_of: subclass out of range");
        return sub_to_super[std::size_t(sub)];
    }

    static TaxonomyMap identity(int k) {
        TaxonomyMap t;
        t.k = k;
        t.sub_to_super.resize(std::size_t(k));
        for (int i = 0; i < k; ++i) t.sub_to_super[std::size_t(i)] = i;
        return t;
    }

    void validate() const {
        if (k < 1) throw IntegrityError("taxonomy: k < 1");
        std::vector<int> count(std::size_t(k), 0);
        for (int s : sub_to_super) {
            if (s < 0 || s >= k) throw IntegrityError("taxonomy: superclass index out of range");
            ++count[std::size_t(s)];
        }
        for (int j = 0; j < k; ++j)
            if (count[std::size_t(j)] == 0)
                throw IntegrityError("taxonomy: superclass " + std::to_string(j + 1) +
                                     " has no subclass");
    }
};

struct Dataset {
    std::vector<Example> examples;
    TaxonomyMap taxonomy;
    int payload_dim = 0;
    int img_h = 0, img_w = 0, img_c = 0;  // zero for feature payloads

    int k() const { return taxonomy.k; }
    int k_sub() const { return taxonomy.k_sub(); }
    std::size_t size() const { return examples.size(); }

    const Example& by_id(const std::string& id) const {
        auto it = id_index_.find(id);
        if (it == id_index_.end()) throw IntegrityError("unknown id: " + id);
        return examples[it->second];
    }
    Example& by_id(const std::string& id) {
        auto it = id_index_.find(id);
        if (it == id_index_.end()) throw IntegrityError("unknown id: " + id);
        return examples[it->second];
    }
    bool has_id(const std::string& id) const { return id_index_.count(id) > 0; }

    void reindex() {
        std::sort(examples.begin(), examples.end(),
                  [](const Example& a, const Example& b) { return a.id < b.id; });
        id_index_.clear();
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (!id_index_.emplace(examples[i].id, i).second)
                throw IntegrityError("duplicate id: " + examples[i].id);
        }
    }

  private:
    std::unordered_map<std::string, std::size_t> id_index_;
};

/// Budgeted split: L (with expert predictions), U (without), held-out test.
struct DatasetSplit {
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
    std::vector<std::string> test_ids;

    std::size_t l() const { return labeled_ids.size(); }
    std::size_t u() const { return unlabeled_ids.size(); }
    std::size_t n() const { return l() + u(); }

    void validate() const {
        std::set<std::string> seen;
        for (const auto* v : {&labeled_ids, &unlabeled_ids, &test_ids})
            for (const auto& id : *v)
                if (!seen.insert(id).second)
                    throw IntegrityError("split: id in multiple parts: " + id);
    }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == delim) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string data_root() {
    const char* env = std::getenv("DEFERKIT_DATA_ROOT");
    return env ? std::string(env) : std::string();
}

inline std::filesystem::path resolve_path(const std::string& rel, const std::string& manifest_dir) {
    std::filesystem::path p(rel);
    if (p.is_absolute()) return p;
    std::string root = data_root();
    if (!root.empty() && std::filesystem::exists(std::filesystem::path(root) / p))
        return std::filesystem::path(root) / p;
    return std::filesystem::path(manifest_dir) / p;
}

inline Vector parse_inline_vector(const std::string& s, int row_no) {
    std::vector<double> vals;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            vals.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw ParseError("row " + std::to_string(row_no) + ": bad payload value '" + tok + "'");
        }
    }
    Vector v(Eigen::Index(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) v[Eigen::Index(i)] = vals[i];
    return v;
}

// Payload field: inline "v1,v2,..." | "path" | "path@record_index" into a
// packed little-endian float64 file with fixed record length.
inline Vector load_payload_field(const std::string& field, int expected_dim,
                                 const std::string& manifest_dir, int row_no) {
    if (field.find(',') != std::string::npos &&
        field.find_first_not_of("0123456789.,+-eE ") == std::string::npos) {
        return parse_inline_vector(field, row_no);
    }
    std::string path = field;
    long record = 0;
    if (auto at = field.rfind('@'); at != std::string::npos) {
        path = field.substr(0, at);
        try {
            record = std::stol(field.substr(at + 1));
        } catch (const std::exception&) {
            throw ParseError("row " + std::to_string(row_no) + ": bad payload record index");
        }
    }
    auto full = resolve_path(path, manifest_dir);
    std::ifstream f(full, std::ios::binary);
    if (!f) throw IntegrityError("row " + std::to_string(row_no) + ": payload path missing: " +
                                 full.string());
    if (expected_dim <= 0)
        throw ParseError("row " + std::to_string(row_no) +
                         ": file payload requires payload_dim/payload_shape in header");
    Vector v(expected_dim);
    f.seekg(std::streamoff(record) * expected_dim * std::streamoff(sizeof(double)));
    f.read(reinterpret_cast<char*>(v.data()), std::streamsize(sizeof(double)) * expected_dim);
    if (!f) throw IntegrityError("row " + std::to_string(row_no) + ": payload record " +
                                 std::to_string(record) + " out of range in " + full.string());
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Manifest I/O.
//
// Header lines start with '#':
//   # deferkit-manifest v1
//   # k=<superclass count>
//   # taxonomy=<k_sub comma-separated 1-based superclass ids>   (optional)
//   # payload_dim=<d>  or  payload_shape=<H>x<W>x<C>            (optional)
//   # columns=<tab-separated column names>
// Body: one tab-separated row per instance, "-" for missing values.
// Recognized columns: id payload y y_sub h h_source h_bin_hat confidence;
// any other column becomes metadata (gender, age, patient_id, ...).
// ---------------------------------------------------------------------------

inline Dataset load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open manifest: " + path);
    std::string manifest_dir = std::filesystem::path(path).parent_path().string();

    Dataset ds;
    int k = 0;
    std::vector<int> taxonomy;
    int payload_dim = 0;
    std::vector<std::string> columns;
    std::string line;
    int row_no = 0;
    bool header_done = false;

    while (std::getline(f, line)) {
        ++row_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (header_done)
                throw ParseError("row " + std::to_string(row_no) + ": header line after data");
            std::string body = line.substr(1);
            auto eq = body.find('=');
            if (eq == std::string::npos) continue;  // banner / comment
            std::string key = body.substr(0, eq);
            std::string val = body.substr(eq + 1);
            key.erase(0, key.find_first_not_of(' '));
            if (key == "k") {
                k = std::stoi(val);
            } else if (key == "taxonomy") {
                std::stringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ',')) taxonomy.push_back(std::stoi(tok) - 1);
            } else if (key == "payload_dim") {
                payload_dim = std::stoi(val);
            } else if (key == "payload_shape") {
                int h = 0, w = 0, c = 0;
                if (std::sscanf(val.c_str(), "%dx%dx%d", &h, &w, &c) != 3)
                    throw ParseError("bad payload_shape: " + val);
                ds.img_h = h;
                ds.img_w = w;
                ds.img_c = c;
                payload_dim = h * w * c;
            } else if (key == "columns") {
                columns = detail::split_fields(val, '\t');
            }
            continue;
        }
        header_done = true;
        if (k < 1) throw ParseError("manifest header missing k");
        if (columns.empty()) throw ParseError("manifest header missing columns");
        auto fields = detail::split_fields(line, '\t');
        if (fields.size() != columns.size())
            throw ParseError("row " + std::to_string(row_no) + ": expected " +
                             std::to_string(columns.size()) + " fields, got " +
                             std::to_string(fields.size()));
        Example ex;
        for (std::size_t ci = 0; ci < columns.size(); ++ci) {
            const std::string& col = columns[ci];
            const std::string& val = fields[ci];
            if (val == "-") continue;
            try {
                if (col == "id") ex.id = val;
                else if (col == "payload") {
                    ex.payload_ref = val;
                    ex.payload.data = detail::load_payload_field(val, payload_dim, manifest_dir,
                                                                 row_no);
                    ex.payload.h = ds.img_h;
                    ex.payload.w = ds.img_w;
                    ex.payload.c = ds.img_c;
                } else if (col == "y") ex.y = std::stoi(val) - 1;
                else if (col == "y_sub") ex.y_sub = std::stoi(val) - 1;
                else if (col == "h") ex.h = std::stoi(val) - 1;
                else if (col == "h_source") ex.h_source = val;
                else if (col == "h_bin_hat") ex.h_bin_hat = std::stoi(val);
                else if (col == "confidence") ex.confidence = std::stod(val);
                else ex.meta[col] = val;
            } catch (const ParseError&) {
                throw;
            } catch (const IntegrityError&) {
                throw;
            } catch (const std::exception&) {
                throw ParseError("row " + std::to_string(row_no) + ": bad value '" + val +
                                 "' in column " + col);
            }
        }
        if (ex.id.empty()) throw ParseError("row " + std::to_string(row_no) + ": missing id");
        if (ex.y < 0) throw ParseError("row " + std::to_string(row_no) + ": missing y");
        ds.examples.push_back(std::move(ex));
    }

    ds.taxonomy = taxonomy.empty() ? TaxonomyMap::identity(k)
                                   : TaxonomyMap{taxonomy, k};
    ds.taxonomy.validate();
    ds.payload_dim = payload_dim > 0 ? payload_dim
                                     : (ds.examples.empty() ? 0 : ds.examples[0].payload.dim());

    for (const auto& ex : ds.examples) {
        if (ex.y >= k) throw IntegrityError("id " + ex.id + ": y out of range 1.." +
                                            std::to_string(k));
        if (ex.h >= k) throw IntegrityError("id " + ex.id + ": h out of range 1.." +
                                            std::to_string(k));
        if (ex.y_sub >= ds.taxonomy.k_sub())
            throw IntegrityError("id " + ex.id + ": y_sub out of range");
        if (ds.payload_dim > 0 && ex.payload.dim() != ds.payload_dim)
            throw IntegrityError("id " + ex.id + ": payload dimension mismatch");
    }
    ds.reindex();
    return ds;
}

inline void save_manifest(const Dataset& ds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write manifest: " + path);
    f << "# deferkit-manifest v1\n";
    f << "# k=" << ds.k() << "\n";
    if (ds.k_sub() != ds.k() || ds.taxonomy.sub_to_super != TaxonomyMap::identity(ds.k()).sub_to_super) {
        f << "# taxonomy=";
        for (int i = 0; i < ds.k_sub(); ++i)
            f << (i ? "," : "") << ds.taxonomy.sub_to_super[std::size_t(i)] + 1;
        f << "\n";
    }
    if (ds.img_h > 0)
        f << "# payload_shape=" << ds.img_h << "x" << ds.img_w << "x" << ds.img_c << "\n";
    else if (ds.payload_dim > 0)
        f << "# payload_dim=" << ds.payload_dim << "\n";

    std::set<std::string> meta_keys;
    bool any_sub = false, any_h = false, any_src = false, any_bin = false, any_conf = false;
    for (const auto& ex : ds.examples) {
        for (const auto& [key, _] : ex.meta) meta_keys.insert(key);
        any_sub |= ex.y_sub >= 0;
        any_h |= ex.h >= 0;
        any_src |= !ex.h_source.empty();
        any_bin |= ex.h_bin_hat >= 0;
        any_conf |= ex.confidence >= 0.0;
    }
    std::vector<std::string> cols = {"id", "payload", "y"};
    if (any_sub) cols.push_back("y_sub");
    if (any_h) cols.push_back("h");
    if (any_src) cols.push_back("h_source");
    if (any_bin) cols.push_back("h_bin_hat");
    if (any_conf) cols.push_back("confidence");
    for (const auto& mk : meta_keys) cols.push_back(mk);

    f << "# columns=";
    for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "\t" : "") << cols[i];
    f << "\n";

    auto payload_field = [](const Example& ex) {
        if (!ex.payload_ref.empty()) return ex.payload_ref;
        std::ostringstream os;
        os.precision(17);
        for (int i = 0; i < ex.payload.dim(); ++i) os << (i ? "," : "") << ex.payload.data[i];
        return os.str();
    };

    for (const auto& ex : ds.examples) {
        for (std::size_t i = 0; i < cols.size(); ++i) {
            if (i) f << "\t";
            const std::string& col = cols[i];
            if (col == "id") f << ex.id;
            else if (col == "payload") f << payload_field(ex);
            else if (col == "y") f << ex.y + 1;
            else if (col == "y_sub") f << (ex.y_sub >= 0 ? std::to_string(ex.y_sub + 1) : "-");
            else if (col == "h") f << (ex.h >= 0 ? std::to_string(ex.h + 1) : "-");
            else if (col == "h_source") f << (ex.h_source.empty() ? "-" : ex.h_source);
            else if (col == "h_bin_hat") f << (ex.h_bin_hat >= 0 ? std::to_string(ex.h_bin_hat) : "-");
            else if (col == "confidence") {
                if (ex.confidence >= 0.0) {
                    std::ostringstream os;
                    os.precision(17);
                    os << ex.confidence;
                    f << os.str();
                } else f << "-";
            } else {
                auto it = ex.meta.find(col);
                f << (it == ex.meta.end() ? "-" : it->second);
            }
        }
        f << "\n";
    }
}

// ---------------------------------------------------------------------------
// Sampling operations.
// ---------------------------------------------------------------------------

/// Balanced labeled budget: exactly m instances per ground-truth class drawn
/// uniformly without replacement from train_ids; the rest become U.
inline DatasetSplit sample_labeled_subset(const Dataset& ds,
                                          const std::vector<std::string>& train_ids, int m,
                                          std::uint64_t seed) {
    if (m < 1) throw PreconditionError("sample_labeled_subset: m must be >= 1");
    std::map<int, std::vector<std::string>> per_class;
    for (const auto& id : train_ids) per_class[ds.by_id(id).y].push_back(id);
    for (int cls = 0; cls < ds.k(); ++cls) {
        auto it = per_class.find(cls);
        std::size_t have = it == per_class.end() ? 0 : it->second.size();
        if (have < std::size_t(m))
            throw InsufficientDataError("class " + std::to_string(cls + 1) + " has only " +
                                        std::to_string(have) + " train instances, need " +
                                        std::to_string(m));
    }
    Rng rng = make_rng(seed);
    DatasetSplit split;
    std::unordered_set<std::string> chosen;
    for (auto& [cls, ids] : per_class) {
        std::sort(ids.begin(), ids.end());  // seed-stable regardless of input order
        auto order = shuffled_indices(ids.size(), rng);
        for (int i = 0; i < m; ++i) {
            split.labeled_ids.push_back(ids[order[std::size_t(i)]]);
            chosen.insert(ids[order[std::size_t(i)]]);
        }
    }
    for (const auto& id : train_ids)
        if (!chosen.count(id)) split.unlabeled_ids.push_back(id);
    std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
    std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
    return split;
}

inline DatasetSplit sample_labeled_subset(const Dataset& ds, int m, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& ex : ds.examples) ids.push_back(ex.id);
    return sample_labeled_subset(ds, ids, m, seed);
}

/// Train/test split, optionally atomic per metadata group (e.g. patient_id).
inline std::pair<std::vector<std::string>, std::vector<std::string>>
split_train_test(const Dataset& ds, double test_fraction,
                 const std::optional<std::string>& group_key, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw PreconditionError("split_train_test: test_fraction must be in (0,1)");
    Rng rng = make_rng(seed);
    std::vector<std::string> train, test;
    if (group_key) {
        std::map<std::string, std::vector<std::string>> groups;
        for (const auto& ex : ds.examples) {
            auto gv = ex.meta_get(*group_key);
            if (!gv) throw MetadataError("id " + ex.id + ": missing group key '" + *group_key + "'");
            groups[*gv].push_back(ex.id);
        }
        std::vector<std::string> keys;
        for (const auto& [gk, _] : groups) keys.push_back(gk);
        auto order = shuffled_indices(keys.size(), rng);
        auto n_test = std::size_t(std::llround(test_fraction * double(keys.size())));
        for (std::size_t i = 0; i < keys.size(); ++i) {
            auto& dst = (i < n_test) ? test : train;
            for (const auto& id : groups[keys[order[i]]]) dst.push_back(id);
        }
    } else {
        std::vector<std::string> ids;
        for (const auto& ex : ds.examples) ids.push_back(ex.id);
        auto order = shuffled_indices(ids.size(), rng);
        auto n_test = std::size_t(std::llround(test_fraction * double(ids.size())));
        for (std::size_t i = 0; i < ids.size(); ++i)
            ((i < n_test) ? test : train).push_back(ids[order[i]]);
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

// Plain id-list persistence, one id per line, for split audit files.
inline void save_id_list(const std::vector<std::string>& ids, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write id list: " + path);
    for (const auto& id : ids) f << id << "\n";
}

inline std::vector<std::string> load_id_list(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open id list: " + path);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ids.push_back(line);
    return ids;
}

}  // namespace deferkit
