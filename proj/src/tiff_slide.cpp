// Reader for the supported TIFF subset: classic (non-Big) TIFF, tiled,
// 8-bit RGB, uncompressed or deflate, either byte order.

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <cstring>
#include <memory>

#include "tileforge/slide_io.hpp"

namespace fs = std::filesystem;

namespace tileforge {

namespace {

constexpr uint16_t kTagImageWidth = 256;
constexpr uint16_t kTagImageLength = 257;
constexpr uint16_t kTagBitsPerSample = 258;
constexpr uint16_t kTagCompression = 259;
constexpr uint16_t kTagPhotometric = 262;
constexpr uint16_t kTagSamplesPerPixel = 277;
constexpr uint16_t kTagTileWidth = 322;
constexpr uint16_t kTagTileLength = 323;
constexpr uint16_t kTagTileOffsets = 324;
constexpr uint16_t kTagTileByteCounts = 325;

constexpr uint16_t kCompNone = 1;
constexpr uint16_t kCompDeflate = 8;
constexpr uint16_t kCompDeflateOld = 32946;

struct FileReader {
    int fd = -1;
    bool swap = false; // file byte order differs from host (host assumed LE)

    ~FileReader() { if (fd >= 0) ::close(fd); }

    void read_at(void* buf, size_t n, int64_t off) const {
        auto* p = static_cast<uint8_t*>(buf);
        while (n > 0) {
            ssize_t r = ::pread(fd, p, n, off);
            if (r <= 0) throw IoError("tiff: short read");
            p += r; off += r; n -= static_cast<size_t>(r);
        }
    }
    uint16_t u16(int64_t off) const {
        uint8_t b[2];
        read_at(b, 2, off);
        return swap ? static_cast<uint16_t>(b[0] << 8 | b[1])
                    : static_cast<uint16_t>(b[1] << 8 | b[0]);
    }
    uint32_t u32(int64_t off) const {
        uint8_t b[4];
        read_at(b, 4, off);
        if (swap)
            return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
                   (uint32_t(b[2]) << 8) | b[3];
        return (uint32_t(b[3]) << 24) | (uint32_t(b[2]) << 16) |
               (uint32_t(b[1]) << 8) | b[0];
    }
};

struct IfdEntry {
    uint16_t tag = 0;
    uint16_t type = 0; // 3 = SHORT, 4 = LONG
    uint32_t count = 0;
    int64_t value_off = 0; // offset of the inline value field
};

struct TiffLevel {
    int64_t width = 0, height = 0;
    int tile_w = 0, tile_h = 0;
    uint16_t compression = kCompNone;
    std::vector<uint64_t> tile_offsets;
    std::vector<uint64_t> tile_counts;
    int tiles_across() const { return static_cast<int>((width + tile_w - 1) / tile_w); }
    int tiles_down() const { return static_cast<int>((height + tile_h - 1) / tile_h); }
};

std::vector<uint32_t> read_values(const FileReader& f, const IfdEntry& e) {
    size_t unit = e.type == 3 ? 2 : 4;
    if (e.type != 3 && e.type != 4)
        throw CorruptHeader("tiff: unexpected field type for tag " + std::to_string(e.tag));
    int64_t off = e.value_off;
    if (unit * e.count > 4) off = f.u32(e.value_off); // stored out of line
    std::vector<uint32_t> vals(e.count);
    for (uint32_t i = 0; i < e.count; ++i)
        vals[i] = e.type == 3 ? f.u16(off + i * 2) : f.u32(off + i * 4);
    return vals;
}

class TiffSlide final : public SlideImage {
public:
    explicit TiffSlide(const fs::path& path) {
        file_ = std::make_shared<FileReader>();
        file_->fd = ::open(path.c_str(), O_RDONLY);
        if (file_->fd < 0) throw IoError("cannot open " + path.string());

        uint8_t hdr[4];
        file_->read_at(hdr, 4, 0);
        if (hdr[0] == 'M' && hdr[1] == 'M') file_->swap = true;

        int64_t ifd_off = file_->u32(4);
        while (ifd_off != 0) {
            parse_ifd(ifd_off);
            uint16_t n = file_->u16(ifd_off);
            ifd_off = file_->u32(ifd_off + 2 + int64_t(n) * 12);
        }
        if (tiff_levels_.empty()) throw CorruptHeader(path.string() + ": no IFDs");

        slide_id_ = path.stem().string();
        for (const auto& lv : tiff_levels_) {
            double ds = static_cast<double>(tiff_levels_[0].width) / lv.width;
            levels_.push_back({lv.width, lv.height, &lv == &tiff_levels_[0] ? 1.0 : ds});
        }
        validate_levels();
    }

private:
    void parse_ifd(int64_t off) {
        uint16_t n = file_->u16(off);
        TiffLevel lv;
        uint16_t samples = 0, photometric = 2;
        std::vector<uint32_t> bits;
        bool tiled = false;
        for (uint16_t i = 0; i < n; ++i) {
            int64_t eoff = off + 2 + int64_t(i) * 12;
            IfdEntry e{file_->u16(eoff), file_->u16(eoff + 2), file_->u32(eoff + 4), eoff + 8};
            switch (e.tag) {
                case kTagImageWidth: lv.width = read_values(*file_, e).at(0); break;
                case kTagImageLength: lv.height = read_values(*file_, e).at(0); break;
                case kTagBitsPerSample: bits = read_values(*file_, e); break;
                case kTagCompression: lv.compression = static_cast<uint16_t>(read_values(*file_, e).at(0)); break;
                case kTagPhotometric: photometric = static_cast<uint16_t>(read_values(*file_, e).at(0)); break;
                case kTagSamplesPerPixel: samples = static_cast<uint16_t>(read_values(*file_, e).at(0)); break;
                case kTagTileWidth: lv.tile_w = static_cast<int>(read_values(*file_, e).at(0)); tiled = true; break;
                case kTagTileLength: lv.tile_h = static_cast<int>(read_values(*file_, e).at(0)); break;
                case kTagTileOffsets: {
                    auto v = read_values(*file_, e);
                    lv.tile_offsets.assign(v.begin(), v.end());
                    break;
                }
                case kTagTileByteCounts: {
                    auto v = read_values(*file_, e);
                    lv.tile_counts.assign(v.begin(), v.end());
                    break;
                }
                default: break; // ignore unrelated tags
            }
        }
        if (!tiled)
            throw UnsupportedFormat("tiff: only tiled images are supported");
        if (lv.compression != kCompNone && lv.compression != kCompDeflate &&
            lv.compression != kCompDeflateOld)
            throw UnsupportedFormat("tiff: unsupported compression " +
                                    std::to_string(lv.compression));
        if (samples != 3 || photometric != 2 ||
            bits.size() != 3 || bits[0] != 8 || bits[1] != 8 || bits[2] != 8)
            throw UnsupportedFormat("tiff: only 8-bit RGB is supported");
        if (lv.width <= 0 || lv.height <= 0 || lv.tile_w <= 0 || lv.tile_h <= 0)
            throw CorruptHeader("tiff: bad geometry");
        size_t n_tiles = static_cast<size_t>(lv.tiles_across()) * lv.tiles_down();
        if (lv.tile_offsets.size() != n_tiles || lv.tile_counts.size() != n_tiles)
            throw CorruptHeader("tiff: tile table size mismatch");
        tiff_levels_.push_back(std::move(lv));
    }

    // Decode one tile into a tile_w*tile_h*3 buffer.
    void decode_tile(const TiffLevel& lv, size_t idx, std::vector<uint8_t>& out) const {
        size_t raw_size = static_cast<size_t>(lv.tile_w) * lv.tile_h * 3;
        out.resize(raw_size);
        if (lv.compression == kCompNone) {
            if (lv.tile_counts[idx] != raw_size)
                throw CorruptHeader("tiff: uncompressed tile size mismatch");
            file_->read_at(out.data(), raw_size, static_cast<int64_t>(lv.tile_offsets[idx]));
            return;
        }
        std::vector<uint8_t> comp(lv.tile_counts[idx]);
        file_->read_at(comp.data(), comp.size(), static_cast<int64_t>(lv.tile_offsets[idx]));
        uLongf dest_len = raw_size;
        int rc = ::uncompress(out.data(), &dest_len, comp.data(), comp.size());
        if (rc != Z_OK || dest_len != raw_size)
            throw CorruptHeader("tiff: deflate tile failed to decode");
    }

    void read_impl(int level, int64_t x, int64_t y, int w, int h,
                   uint8_t* dst) const override {
        const auto& lv = tiff_levels_[level];
        int tx0 = static_cast<int>(x / lv.tile_w);
        int tx1 = static_cast<int>((x + w - 1) / lv.tile_w);
        int ty0 = static_cast<int>(y / lv.tile_h);
        int ty1 = static_cast<int>((y + h - 1) / lv.tile_h);
        std::vector<uint8_t> tile;
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                decode_tile(lv, static_cast<size_t>(ty) * lv.tiles_across() + tx, tile);
                int64_t ox0 = std::max<int64_t>(x, int64_t(tx) * lv.tile_w);
                int64_t ox1 = std::min<int64_t>(x + w, int64_t(tx + 1) * lv.tile_w);
                int64_t oy0 = std::max<int64_t>(y, int64_t(ty) * lv.tile_h);
                int64_t oy1 = std::min<int64_t>(y + h, int64_t(ty + 1) * lv.tile_h);
                for (int64_t row = oy0; row < oy1; ++row) {
                    const uint8_t* src = tile.data() +
                        ((row - int64_t(ty) * lv.tile_h) * lv.tile_w +
                         (ox0 - int64_t(tx) * lv.tile_w)) * 3;
                    uint8_t* d = dst + ((row - y) * w + (ox0 - x)) * 3;
                    std::memcpy(d, src, static_cast<size_t>(ox1 - ox0) * 3);
                }
            }
        }
    }

    std::shared_ptr<FileReader> file_;
    std::vector<TiffLevel> tiff_levels_;
};

} // namespace

std::unique_ptr<SlideImage> make_tiff_slide(const fs::path& path) {
    return std::make_unique<TiffSlide>(path);
}

} // namespace tileforge
