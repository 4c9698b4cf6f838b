# Backend package for trimodal contrastive audio learning
