#include "dkua/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace dkua {

namespace {

constexpr char kIndexHeader[] = "#dkua-index v1";
constexpr char kImageMagic[8] = {'D', 'K', 'U', 'A', ' ', 'I', 'M', 'G'};

std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

using Rgb = std::array<double, 3>;

Rgb random_color(std::mt19937_64& rng) { return {uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)}; }

// Procedural pedestrian: head, torso with a pattern, legs, optional bag.
struct Appearance {
  Rgb skin, hair, torso, accent, legs, shoes, bag;
  int pattern = 0;
  int body_width = 8;
  int torso_top = 9;
  int legs_top = 19;
  bool has_bag = false;
};

Appearance sample_appearance(std::mt19937_64& rng, int height, int width) {
  Appearance a;
  a.skin = {uniform(rng, 0.55, 0.9), uniform(rng, 0.4, 0.7), uniform(rng, 0.3, 0.55)};
  a.hair = random_color(rng);
  a.torso = random_color(rng);
  a.accent = random_color(rng);
  a.legs = random_color(rng);
  a.shoes = random_color(rng);
  a.bag = random_color(rng);
  a.pattern = uniform_int(rng, 0, 3);
  a.body_width = std::clamp(uniform_int(rng, width / 2 - 2, width / 2 + 2), 2, width);
  a.torso_top = height * 9 / 32;
  a.legs_top = height * 19 / 32 + uniform_int(rng, -1, 1);
  a.has_bag = uniform_int(rng, 0, 1) == 1;
  return a;
}

double background_value(int pattern, int channel, int y, int x, int height) {
  switch (pattern) {
    case 1:
      return 0.25 + 0.5 * static_cast<double>(y) / std::max(1, height - 1);
    case 2:
      return ((y / 4 + x / 4) % 2 == 0) ? 0.35 : 0.6;
    case 3:
      return (y % 6 < 3) ? 0.3 + 0.05 * channel : 0.65;
    default:
      return 0.5;
  }
}

// Renders the identity into a C x H x W row; (dx, dy) shifts the figure.
Tensor render(const Appearance& a, const DomainSpec& spec, int dx, int dy) {
  const int h = spec.height;
  const int w = spec.width;
  Tensor img(1, spec.channels * h * w);
  const int center = w / 2 + dx;
  const int half = a.body_width / 2;
  const int head_half = std::max(1, a.body_width / 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int fy = y - dy;
      const int rx = x - center;
      const Rgb* color = nullptr;
      Rgb mixed{};
      if (fy >= 1 && fy < a.torso_top && std::abs(rx) <= head_half) {
        color = (fy < 3) ? &a.hair : &a.skin;
      } else if (fy >= a.torso_top && fy < a.legs_top && std::abs(rx) <= half) {
        bool accent = false;
        switch (a.pattern) {
          case 1: accent = (fy % 4) < 2; break;
          case 2: accent = ((rx + half) % 4) < 2; break;
          case 3: accent = ((fy / 2 + (rx + half) / 2) % 2) == 0; break;
          default: break;
        }
        color = accent ? &a.accent : &a.torso;
      } else if (fy >= a.legs_top && fy < h - 2 && std::abs(rx) <= half - 1 && rx != 0) {
        color = &a.legs;
      } else if (fy >= h - 2 && fy < h && std::abs(rx) <= half - 1 && rx != 0) {
        color = &a.shoes;
      } else if (a.has_bag && fy >= a.torso_top + 2 && fy < a.legs_top + 1 && rx > half && rx <= half + 2) {
        color = &a.bag;
      }
      for (int c = 0; c < spec.channels; ++c) {
        double v;
        if (color != nullptr) {
          mixed = *color;
          v = mixed[static_cast<std::size_t>(c % 3)];
        } else {
          v = background_value(spec.style.background, c, y, x, h);
        }
        img(0, (c * h + y) * w + x) = v;
      }
    }
  }
  return img;
}

Image quantize(const Tensor& row, const DomainSpec& spec) {
  Image out;
  out.channels = static_cast<std::uint16_t>(spec.channels);
  out.height = static_cast<std::uint16_t>(spec.height);
  out.width = static_cast<std::uint16_t>(spec.width);
  out.pixels.resize(static_cast<std::size_t>(row.size()));
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    out.pixels[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(std::clamp(row.data()[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>(v >> 8));
}

std::uint16_t get_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

int parse_int_field(const std::string& field, const char* name, std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("invalid ") + name + " field '" + field + "'", line);
  }
}

}  // namespace

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Query: return "query";
    case Split::Gallery: return "gallery";
  }
  return "train";
}

Split parse_split(const std::string& token) {
  if (token == "train") return Split::Train;
  if (token == "query") return Split::Query;
  if (token == "gallery") return Split::Gallery;
  throw ValidationError("unknown split '" + token + "'");
}

void DomainSpec::validate() const {
  for (double g : style.gain) {
    if (!(g > 0.0)) throw ConfigError("domain '" + name + "': gains must be positive");
  }
  if (!(style.noise >= 0.0)) throw ConfigError("domain '" + name + "': noise sigma must be non-negative");
  if (identities != 0 && identities < 2) throw ConfigError("domain '" + name + "': need at least 2 identities");
  if (eval_identities < 0 || (identities == 0 && eval_identities < 2)) {
    throw ConfigError("domain '" + name + "': need at least 2 evaluation identities");
  }
  if (instances < 2) throw ConfigError("domain '" + name + "': need at least 2 instances per identity");
  if (cameras < 1) throw ConfigError("domain '" + name + "': need at least one camera");
  if (eval_identities > 0 && cameras < 2) {
    throw ConfigError("domain '" + name + "': cross-camera evaluation needs at least 2 cameras");
  }
  if (jitter < 0) throw ConfigError("domain '" + name + "': jitter must be non-negative");
  if (channels < 1 || channels > 3 || height < 8 || width < 8) throw ConfigError("domain '" + name + "': bad image shape");
  if (style.background < 0 || style.background > 3) throw ConfigError("domain '" + name + "': background id in 0..3");
}

Eigen::RowVectorXd Image::to_row() const {
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) row(static_cast<Eigen::Index>(i)) = pixels[i] / 255.0;
  return row;
}

std::vector<int> DatasetIndex::domains() const {
  std::set<int> ids;
  for (const IndexRecord& r : records) ids.insert(r.domain);
  return {ids.begin(), ids.end()};
}

bool DatasetIndex::has_train(int domain) const {
  return std::any_of(records.begin(), records.end(),
                     [domain](const IndexRecord& r) { return r.domain == domain && r.split == Split::Train; });
}

void DatasetIndex::check_disjoint_identities() const {
  std::map<int, int> owner;
  for (const IndexRecord& r : records) {
    auto [it, inserted] = owner.emplace(r.identity, r.domain);
    if (!inserted && it->second != r.domain) {
      throw ValidationError("identity " + std::to_string(r.identity) + " appears in domains " +
                            std::to_string(it->second) + " and " + std::to_string(r.domain));
    }
  }
}

Dataset Dataset::select(int domain) const {
  Dataset out;
  for (std::size_t i = 0; i < index.records.size(); ++i) {
    if (index.records[i].domain != domain) continue;
    out.index.records.push_back(index.records[i]);
    out.images.push_back(images[i]);
  }
  return out;
}

Dataset Dataset::select(int domain, Split split) const {
  Dataset out;
  for (std::size_t i = 0; i < index.records.size(); ++i) {
    if (index.records[i].domain != domain || index.records[i].split != split) continue;
    out.index.records.push_back(index.records[i]);
    out.images.push_back(images[i]);
  }
  return out;
}

void Dataset::append(const Dataset& other) {
  index.records.insert(index.records.end(), other.index.records.begin(), other.index.records.end());
  images.insert(images.end(), other.images.begin(), other.images.end());
}

Tensor apply_style(const Tensor& image, const DomainStyle& s, int channels, std::uint64_t noise_seed) {
  if (channels < 1 || image.size() % channels != 0) throw DimensionError("apply_style: channel count");
  const Eigen::Index plane = image.size() / channels;
  Tensor out(image.rows(), image.cols());
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int c = 0; c < channels; ++c) {
    const auto ci = static_cast<std::size_t>(c % 3);
    for (Eigen::Index i = 0; i < plane; ++i) {
      const Eigen::Index at = c * plane + i;
      double v = std::clamp(s.gain[ci] * image.data()[at] + s.bias[ci] + s.brightness, 0.0, 1.0);
      if (s.noise > 0.0) v = std::clamp(v + s.noise * noise(rng), 0.0, 1.0);
      out.data()[at] = v;
    }
  }
  return out;
}

Dataset generate_domain(const DomainSpec& spec, std::uint64_t seed, int domain, int first_identity) {
  spec.validate();
  Dataset out;
  const int total = spec.identities + spec.eval_identities;
  std::vector<DomainStyle> camera_style(static_cast<std::size_t>(spec.cameras), spec.style);
  for (int cam = 0; cam < spec.cameras; ++cam) {
    std::mt19937_64 cast = make_rng({seed, 0x3f, static_cast<std::uint64_t>(cam)});
    std::normal_distribution<double> z(0.0, 1.0);
    for (double& g : camera_style[static_cast<std::size_t>(cam)].gain) g *= std::exp(spec.style.camera_cast * z(cast));
  }
  for (int local = 0; local < total; ++local) {
    std::mt19937_64 look = make_rng({seed, 0x1d, static_cast<std::uint64_t>(local)});
    const Appearance appearance = sample_appearance(look, spec.height, spec.width);
    const bool train = local < spec.identities;
    const int identity = first_identity + local;
    for (int inst = 0; inst < spec.instances; ++inst) {
      std::mt19937_64 pose = make_rng({seed, 0x2e, static_cast<std::uint64_t>(local), static_cast<std::uint64_t>(inst)});
      const int dx = spec.jitter > 0 ? uniform_int(pose, -spec.jitter, spec.jitter) : 0;
      const int dy = spec.jitter > 0 ? uniform_int(pose, -spec.jitter, spec.jitter) : 0;
      const std::uint64_t noise_seed = pose();
      const int camera = inst % spec.cameras;
      const Tensor styled = apply_style(render(appearance, spec, dx, dy), camera_style[static_cast<std::size_t>(camera)],
                                        spec.channels, noise_seed);

      IndexRecord rec;
      rec.identity = identity;
      rec.camera = camera;
      rec.domain = domain;
      rec.split = train ? Split::Train : (inst < spec.cameras ? Split::Query : Split::Gallery);
      std::ostringstream path;
      path << "images/d" << domain << "/" << identity << "_" << inst << ".img";
      rec.path = path.str();
      out.index.records.push_back(std::move(rec));
      out.images.push_back(quantize(styled, spec));
    }
  }
  return out;
}

std::vector<DomainSpec> default_domain_specs() {
  std::vector<DomainSpec> specs(4);
  specs[0].name = "daylight";
  specs[0].style.background = 0;
  specs[0].style.noise = 0.02;

  specs[1].name = "dusk";
  specs[1].style.gain = {0.55, 0.6, 0.9};
  specs[1].style.bias = {0.0, 0.02, 0.1};
  specs[1].style.brightness = -0.05;
  specs[1].style.noise = 0.04;
  specs[1].style.background = 1;
  specs[1].style.camera_cast = 0.15;

  specs[2].name = "indoor";
  specs[2].style.gain = {1.2, 0.9, 0.6};
  specs[2].style.bias = {0.05, 0.05, 0.0};
  specs[2].style.brightness = 0.1;
  specs[2].style.noise = 0.05;
  specs[2].style.background = 2;
  specs[2].style.camera_cast = 0.15;

  specs[3].name = "unseen-night";
  specs[3].identities = 0;
  specs[3].style.gain = {0.7, 0.9, 0.7};
  specs[3].style.bias = {0.0, 0.1, 0.0};
  specs[3].style.brightness = -0.1;
  specs[3].style.noise = 0.06;
  specs[3].style.background = 3;
  return specs;
}

Dataset generate_sequence(const std::vector<DomainSpec>& specs, std::uint64_t seed) {
  Dataset out;
  int first_identity = 0;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    const int domain = static_cast<int>(d) + 1;
    out.append(generate_domain(specs[d], seed * 1000003ULL + static_cast<std::uint64_t>(domain), domain, first_identity));
    first_identity += specs[d].identities + specs[d].eval_identities;
  }
  out.index.check_disjoint_identities();
  return out;
}

void write_index(const std::filesystem::path& path, const DatasetIndex& index) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write index " + path.string());
  out << kIndexHeader << '\n';
  for (const IndexRecord& r : index.records) {
    out << r.path << '\t' << r.identity << '\t' << r.camera << '\t' << r.domain << '\t' << to_string(r.split) << '\n';
  }
}

DatasetIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read index " + path.string());
  DatasetIndex index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (lineno != 1 || line != kIndexHeader) throw ParseError("unexpected header '" + line + "'", lineno);
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 5) throw ParseError("expected 5 tab-separated fields, got " + std::to_string(fields.size()), lineno);
    IndexRecord r;
    r.path = fields[0];
    r.identity = parse_int_field(fields[1], "identity", lineno);
    r.camera = parse_int_field(fields[2], "camera", lineno);
    r.domain = parse_int_field(fields[3], "domain", lineno);
    try {
      r.split = parse_split(fields[4]);
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), lineno);
    }
    index.records.push_back(std::move(r));
  }
  return index;
}

void write_image(const std::filesystem::path& path, const Image& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.channels) * image.height * image.width) {
    throw DimensionError("image payload does not match its header");
  }
  std::string buf(kImageMagic, sizeof(kImageMagic));
  put_u16(buf, image.channels);
  put_u16(buf, image.height);
  put_u16(buf, image.width);
  put_u16(buf, 0);  // reserved
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read image " + path.string());
  unsigned char header[16];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header)) ||
      !std::equal(kImageMagic, kImageMagic + 8, reinterpret_cast<const char*>(header))) {
    throw IntegrityError("bad image header in " + path.string());
  }
  Image img;
  img.channels = get_u16(header + 8);
  img.height = get_u16(header + 10);
  img.width = get_u16(header + 12);
  img.pixels.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw IntegrityError("truncated image payload in " + path.string());
  }
  return img;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  write_index(dir / "index.tsv", dataset.index);
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const std::filesystem::path p = dir / dataset.index.records[i].path;
    std::filesystem::create_directories(p.parent_path());
    write_image(p, dataset.images[i]);
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset out;
  out.index = load_index(dir / "index.tsv");
  out.images.reserve(out.index.records.size());
  for (const IndexRecord& r : out.index.records) out.images.push_back(read_image(dir / r.path));
  return out;
}

PkSampler::PkSampler(const Dataset& domain_train, int p, int k, std::uint64_t seed)
    : data_(&domain_train), p_(p), k_(k), seed_(seed) {
  if (p < 2 || k < 2) throw ConfigError("PK sampling needs P >= 2 and K >= 2");
  for (std::size_t i = 0; i < domain_train.index.records.size(); ++i) {
    const IndexRecord& r = domain_train.index.records[i];
    if (r.split != Split::Train) continue;
    members_[r.identity].push_back(i);
  }
  for (const auto& [identity, list] : members_) {
    if (static_cast<int>(list.size()) >= k) {
      labels_[identity] = static_cast<int>(identity_order_.size());
      identity_order_.push_back(identity);
    }
  }
  if (static_cast<int>(identity_order_.size()) < p) {
    throw ConfigError("PK sampling needs " + std::to_string(p) + " identities with >= " + std::to_string(k) +
                      " train instances, found " + std::to_string(identity_order_.size()));
  }
}

std::vector<std::vector<std::size_t>> PkSampler::epoch(int epoch) const {
  std::mt19937_64 rng = make_rng({seed_, 0x9c, static_cast<std::uint64_t>(epoch)});
  struct Slot {
    int identity;
    std::vector<std::vector<std::size_t>> chunks;
    bool used = false;
  };
  std::vector<Slot> slots;
  for (int identity : identity_order_) {
    std::vector<std::size_t> list = members_.at(identity);
    std::shuffle(list.begin(), list.end(), rng);
    Slot s{identity, {}, false};
    for (std::size_t at = 0; at + static_cast<std::size_t>(k_) <= list.size(); at += static_cast<std::size_t>(k_)) {
      s.chunks.emplace_back(list.begin() + static_cast<std::ptrdiff_t>(at),
                            list.begin() + static_cast<std::ptrdiff_t>(at) + k_);
    }
    slots.push_back(std::move(s));
  }
  // Seeded priority breaks ties between identities with equal remaining chunks.
  std::vector<std::size_t> priority(slots.size());
  for (std::size_t i = 0; i < priority.size(); ++i) priority[i] = i;
  std::shuffle(priority.begin(), priority.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  while (true) {
    std::vector<std::size_t> order = priority;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return slots[a].chunks.size() > slots[b].chunks.size(); });
    if (order.size() < static_cast<std::size_t>(p_) || slots[order[static_cast<std::size_t>(p_) - 1]].chunks.empty()) {
      break;
    }
    std::vector<std::size_t> batch;
    for (int i = 0; i < p_; ++i) {
      Slot& s = slots[order[static_cast<std::size_t>(i)]];
      batch.insert(batch.end(), s.chunks.back().begin(), s.chunks.back().end());
      s.chunks.pop_back();
      s.used = true;
    }
    batches.push_back(std::move(batch));
  }

  // Identities left out by the greedy pass go into a final batch padded with
  // fresh draws from already-covered identities.
  std::vector<std::size_t> missing;
  for (std::size_t i : priority) {
    if (!slots[i].used) missing.push_back(i);
  }
  while (!missing.empty()) {
    std::vector<std::size_t> chosen;
    while (!missing.empty() && chosen.size() < static_cast<std::size_t>(p_)) {
      chosen.push_back(missing.front());
      missing.erase(missing.begin());
    }
    for (std::size_t i : priority) {
      if (chosen.size() >= static_cast<std::size_t>(p_)) break;
      if (std::find(chosen.begin(), chosen.end(), i) == chosen.end() && slots[i].used) chosen.push_back(i);
    }
    std::vector<std::size_t> batch;
    for (std::size_t i : chosen) {
      std::vector<std::size_t> list = members_.at(slots[i].identity);
      std::shuffle(list.begin(), list.end(), rng);
      batch.insert(batch.end(), list.begin(), list.begin() + k_);
      slots[i].used = true;
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Batch PkSampler::make_batch(const std::vector<std::size_t>& records) const {
  Batch b;
  if (records.empty()) return b;
  const Image& first = data_->images[records.front()];
  b.images.resize(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(first.pixels.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const IndexRecord& r = data_->index.records[records[i]];
    b.images.row(static_cast<Eigen::Index>(i)) = data_->images[records[i]].to_row();
    b.identities.push_back(r.identity);
    b.labels.push_back(labels_.at(r.identity));
    b.domain = r.domain;
  }
  return b;
}

}  // namespace dkua
