#pragma once

#include <memory>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fastio/exit_event.hpp"
#include "fastio/guest_memory.hpp"
#include "fastio/layout.hpp"
#include "fastio/machine_state.hpp"
#include "fastio/patch.hpp"

namespace fastio {

enum class PageKind {
  Normal,
  GuestPageTable,
  DriverCode,
  DriverReadOnly,
  PgpaDevice,
  PgpaSlab,
};

struct EptEntry {
  GpaPage gpa_page = 0;
  bool present = false;
  bool read = false;
  bool write = false;
  bool execute = false;
  std::optional<std::uint64_t> backing;
  PageKind kind = PageKind::Normal;
};

struct MonitorConfig {
  OpcodePredicate predicate;
  PagingConfig paging;
  // Execution attempts tolerated on a page whose instruction boundary could
  // not be recovered before falling back to patching just the sequence bytes.
  std::uint32_t deferred_patch_threshold = 64;
};

enum class ValidateOutcome { Ok, AttackDetected, GuestFault };
enum class MapOutcome { Mapped, Refused, AttackDetected };

struct ExecResult {
  bool granted = false;
  bool deferred = false;      // page is being emulated, not executed
  const ExitEvent* event = nullptr;
};

struct PtWritePayload {
  std::uint32_t entry_index = 0;
  std::uint64_t value = 0;
};

// Extended-page-table side of the hypervisor: one entry per guest-physical
// page, write-xor-execute at all times, opcode subtraction on every page that
// gains execute. Single writer; callers serialize.
class EptMonitor {
 public:
  EptMonitor(GuestMemory& mem, PptLayout layout, MonitorConfig cfg = {});

  // --- wiring -------------------------------------------------------------
  void set_registry(const SlabRegistry* registry) { registry_ = registry; }
  void set_ppt_root(GpaPage root) { ppt_root_ = root; }
  void set_active_root(GpaPage root) { active_root_ = root; }
  GpaPage active_root() const { return active_root_; }

  // Driver pages become the only executable-by-fiat region; everything else
  // falls back to scan-on-execute. rw_pages are hypervisor-owned driver data
  // (spill scratch, the private stack) that guests can touch only through the
  // driver itself — guest page tables pointing at them never validate.
  void install_driver(const std::vector<GpaPage>& code_pages,
                      const std::vector<GpaPage>& ro_pages,
                      const std::vector<GpaPage>& rw_pages = {});

  // Hypervisor-premapped PGPA page (device window state, private stack).
  void premap_device_page(GpaPage page, bool writable);

  // The faulting eip is the only trustworthy instruction boundary. Starts are
  // a property of the bytes, so the earliest one is kept per physical page
  // and forgotten the moment the page is written.
  void note_eip(GpaPage page, std::uint32_t offset);

  // --- the four fault paths -------------------------------------------------
  ExecResult request_execute(GpaPage page, std::optional<VPage> vpage = std::nullopt);
  // Returns nullptr when the write never trapped (page was already writable).
  const ExitEvent* write_access(GpaPage page,
                                std::optional<PtWritePayload> pt = std::nullopt);
  ValidateOutcome protect_page_tables(GpaPage root);
  const ExitEvent& handle_pt_write(GpaPage table_page, std::uint32_t entry_index,
                                   std::uint64_t value);
  MapOutcome map_pgpa_on_demand(GpaPage page, CpuMode mode);

  // --- introspection --------------------------------------------------------
  const EptEntry& entry(GpaPage page) const;
  bool is_table_page(GpaPage page) const { return table_roles_.count(page) != 0; }
  bool is_deferred(GpaPage page) const;
  const PatchRecord* patch_at(GpaPage page, std::uint32_t offset) const;
  std::vector<const PatchRecord*> patches() const;
  std::vector<GpaPage> executable_pages() const;
  std::vector<std::pair<GpaPage, GpaPage>> adjacent_executable_pairs(GpaPage root) const;
  ExitLog& log() { return log_; }
  const ExitLog& log() const { return log_; }
  const MonitorConfig& config() const { return cfg_; }
  const PptLayout& layout() const { return layout_; }
  GuestMemory& memory() { return mem_; }

 private:
  EptEntry& live_entry(GpaPage page);
  void grant_execute(GpaPage page);
  void revoke_execute(GpaPage page);
  void drop_record(const std::shared_ptr<PatchRecord>& rec);
  void revert_patches_on(GpaPage page);
  void scan_and_patch(GpaPage page, std::optional<VPage> vpage);
  void check_straddle(GpaPage pred_page, GpaPage succ_page);
  void prune_dead_deferred(GpaPage page);
  bool recorded_at(GpaPage page, std::uint32_t hit_offset) const;
  BoundaryResult boundary_for(GpaPage page, std::uint32_t hit_offset,
                              std::span<const Byte> window);
  void mark_table_page(GpaPage page, GpaPage root, std::uint32_t base_index);
  ValidateOutcome validate_leaf_table(GpaPage table);
  void neighbor_checks_after_map(GpaPage root, VPage vpage, GpaPage target);
  const ExitEvent& log_event(ExitEvent ev) { return log_.append(std::move(ev)); }

  GuestMemory& mem_;
  PptLayout layout_;
  MonitorConfig cfg_;
  const SlabRegistry* registry_ = nullptr;
  ExitLog log_;

  std::unordered_map<GpaPage, EptEntry> ept_;
  // Records indexed under their page and, for straddles, the successor too.
  std::unordered_map<GpaPage, std::vector<std::shared_ptr<PatchRecord>>> patches_;

  struct TableRole {
    GpaPage root = 0;
    bool root_page = false;
    std::uint32_t base_index = 0;  // first root/leaf slot this page covers
  };
  std::unordered_map<GpaPage, std::vector<TableRole>> table_roles_;
  std::unordered_set<GpaPage> seen_roots_;

  std::unordered_map<GpaPage, std::uint32_t> known_eips_;

  GpaPage ppt_root_ = 0;
  GpaPage active_root_ = 0;
};

}  // namespace fastio
