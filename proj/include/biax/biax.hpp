#pragma once

#include "biax/errors.hpp"
#include "biax/tensor.hpp"
#include "biax/ops.hpp"
#include "biax/attention.hpp"
#include "biax/nn.hpp"
#include "biax/checkpoint.hpp"
#include "biax/table_batch.hpp"
#include "biax/column_embedder.hpp"
#include "biax/row_encoder.hpp"
#include "biax/icl_head.hpp"
#include "biax/model.hpp"
#include "biax/labeled_table.hpp"
#include "biax/synthetic_prior.hpp"
#include "biax/episodes.hpp"
#include "biax/trainer.hpp"
#include "biax/pipeline.hpp"
#include "biax/eval.hpp"
