from __future__ import annotations

from dissect.cstruct import cstruct

checkpoint_def = """
#define CHECKPOINT_MAGIC    b"SRCK"
#define EMBEDDING_MAGIC     b"SREM"

struct checkpoint_header {
    char            magic[4];
    uint32          version;
};

struct tensor_record {
    uint32          name_length;
    char            name[name_length];      // UTF-8
    uint32          rank;
    uint64          dims[rank];
    // float32      data[prod(dims)];
};

struct embedding_header {
    char            magic[4];
    uint64          count;
    uint32          dim;
};

struct embedding_row {
    uint32          id_length;
    char            id[id_length];          // UTF-8
    // float32      vector[dim];
};
"""

c_checkpoint = cstruct(endian="<").load(checkpoint_def)

# Sample type of all tensor payloads
FLOAT_DTYPE = "<f4"
